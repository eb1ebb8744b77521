//! Generate → critique → regenerate loop over panoramas.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::{Critic, HookError, ImageHook};
use crate::io::{write_png, BitDepth};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRound {
    pub round: usize,
    pub prompt: String,
    pub panorama_path: PathBuf,
    pub critic_score: Option<f64>,
    pub critic_feedback: Option<String>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("generator failed in round {round}: {source}")]
    Generator {
        round: usize,
        #[source]
        source: HookError,
        history: Vec<RefinementRound>,
    },
    #[error("could not persist session: {0}")]
    Persist(String),
}

impl RefineError {
    pub fn history(&self) -> &[RefinementRound] {
        match self {
            RefineError::Generator { history, .. } => history,
            RefineError::Persist(_) => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementOutcome {
    pub best: RefinementRound,
    pub history: Vec<RefinementRound>,
    /// Set when the critic failed and the loop stopped early.
    pub critic_error: Option<String>,
}

/// Knobs of a refinement session.
#[derive(Clone, Debug)]
pub struct RefineSettings {
    pub max_rounds: usize,
    /// Size of the blank canvas handed to the generator in round 0.
    pub panorama_height: usize,
    pub session_dir: PathBuf,
}

/// Highest critic score wins; unscored rounds rank last and ties go to the
/// earliest round.
pub fn select_best(history: &[RefinementRound]) -> Option<&RefinementRound> {
    let mut best: Option<&RefinementRound> = None;
    for r in history {
        best = match best {
            None => Some(r),
            Some(b) => {
                let (bs, rs) = (b.critic_score.unwrap_or(f64::NEG_INFINITY), r.critic_score.unwrap_or(f64::NEG_INFINITY));
                if rs > bs {
                    Some(r)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn session_log_path(dir: &Path) -> PathBuf {
    dir.join("session.json")
}

fn persist(dir: &Path, history: &[RefinementRound]) -> Result<(), RefineError> {
    let text = serde_json::to_string_pretty(history).map_err(|e| RefineError::Persist(e.to_string()))?;
    std::fs::write(session_log_path(dir), text + "\n").map_err(|e| RefineError::Persist(e.to_string()))
}

/// Runs up to `max_rounds + 1` generation rounds. Round 0 uses
/// `initial_prompt`; every later round uses the prompt the critic emitted
/// for the previous panorama. The session log is rewritten after each
/// completed round, so a generator failure leaves the partial history on
/// disk as well as in the returned error.
pub fn run_refinement(
    initial_prompt: &str,
    generator: &dyn ImageHook,
    critic: Option<&dyn Critic>,
    settings: &RefineSettings,
) -> Result<RefinementOutcome, RefineError> {
    std::fs::create_dir_all(&settings.session_dir).map_err(|e| RefineError::Persist(e.to_string()))?;
    let h = settings.panorama_height.max(1);
    let mut canvas = Image::filled(2 * h, h, &[0.5, 0.5, 0.5]);
    let mut history: Vec<RefinementRound> = Vec::new();
    let mut prompt = initial_prompt.to_string();
    let mut critic_error = None;

    for round in 0..=settings.max_rounds {
        let panorama = match generator.apply(&canvas, &prompt) {
            Ok(p) => p,
            Err(source) => {
                return Err(RefineError::Generator {
                    round,
                    source,
                    history,
                })
            }
        };
        let file = format!("round_{round:03}.png");
        let path = settings.session_dir.join(&file);
        write_png(&path, &panorama, BitDepth::Eight).map_err(|e| RefineError::Persist(e.to_string()))?;

        let mut record = RefinementRound {
            round,
            prompt: prompt.clone(),
            panorama_path: PathBuf::from(file),
            critic_score: None,
            critic_feedback: None,
        };
        let next_prompt = match critic {
            None => {
                history.push(record);
                persist(&settings.session_dir, &history)?;
                break;
            }
            Some(c) => match c.critique(&panorama, &prompt) {
                Ok(v) => {
                    record.critic_score = Some(v.score);
                    record.critic_feedback = Some(v.feedback);
                    v.prompt
                }
                Err(e) => {
                    // an unscored round is incomplete and is left out, except
                    // round 0 which is always the fallback result
                    critic_error = Some(format!("critic failed in round {round}: {e}"));
                    if round == 0 {
                        history.push(record);
                        persist(&settings.session_dir, &history)?;
                    }
                    break;
                }
            },
        };
        history.push(record);
        persist(&settings.session_dir, &history)?;
        prompt = next_prompt;
        canvas = panorama;
    }

    let best = select_best(&history).expect("nonempty history").clone();
    Ok(RefinementOutcome {
        best,
        history,
        critic_error,
    })
}

/// Re-runs best-round selection from a persisted session log.
pub fn replay_session(dir: &Path) -> Result<RefinementRound, RefineError> {
    let text = std::fs::read_to_string(session_log_path(dir)).map_err(|e| RefineError::Persist(e.to_string()))?;
    let history: Vec<RefinementRound> =
        serde_json::from_str(&text).map_err(|e| RefineError::Persist(e.to_string()))?;
    select_best(&history)
        .cloned()
        .ok_or_else(|| RefineError::Persist("session log is empty".into()))
}
