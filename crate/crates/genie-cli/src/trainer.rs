//! Trainer hand-off hooks: an executable receiving the request JSON on
//! stdin and answering on stdout, or an HTTP endpoint POSTed the same shape.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use genie::rounds::{RoundError, TrainerHook, TrainerOutcome, TrainerRequest};
use serde::{Deserialize, Serialize};

/// Where a round hands its datasets for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerSpec {
    Exec { program: PathBuf },
    Http { url: String },
}

impl TrainerSpec {
    pub fn hook(&self) -> Box<dyn TrainerHook> {
        match self {
            TrainerSpec::Exec { program } => Box::new(ExecTrainer { program: program.clone() }),
            TrainerSpec::Http { url } => Box::new(HttpTrainer { url: url.clone() }),
        }
    }
}

struct ExecTrainer {
    program: PathBuf,
}

impl TrainerHook for ExecTrainer {
    fn finetune(&self, request: &TrainerRequest) -> Result<TrainerOutcome, RoundError> {
        let name = self.program.display();
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| RoundError::Trainer(format!("cannot spawn {name}: {e}")))?;
        let input = serde_json::to_vec(request).expect("trainer requests serialize");
        let mut stdin = child.stdin.take().expect("stdin is piped");
        stdin
            .write_all(&input)
            .map_err(|e| RoundError::Trainer(format!("cannot write to {name}: {e}")))?;
        drop(stdin);
        let output = child
            .wait_with_output()
            .map_err(|e| RoundError::Trainer(format!("cannot wait for {name}: {e}")))?;
        if !output.status.success() {
            return Err(RoundError::Trainer(format!("{name} exited with {}", output.status)));
        }
        serde_json::from_slice(&output.stdout)
            .map_err(|e| RoundError::Trainer(format!("malformed reply from {name}: {e}")))
    }
}

struct HttpTrainer {
    url: String,
}

impl TrainerHook for HttpTrainer {
    fn finetune(&self, request: &TrainerRequest) -> Result<TrainerOutcome, RoundError> {
        // Fine-tuning is slow; allow far more than the scoring timeout.
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(3600)).build();
        let response = agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| RoundError::Trainer(format!("trainer endpoint failed: {e}")))?;
        response
            .into_json()
            .map_err(|e| RoundError::Trainer(format!("malformed trainer reply: {e}")))
    }
}
