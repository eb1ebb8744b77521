use std::sync::Mutex;

use panosplat::hooks::{Critic, CriticVerdict, HookError, ImageHook};
use panosplat::refine::*;
use panosplat::Image;

struct Generator {
    calls: Mutex<usize>,
    fail_on: Option<usize>,
}

impl Generator {
    fn new(fail_on: Option<usize>) -> Self {
        Self {
            calls: Mutex::new(0),
            fail_on,
        }
    }
}

impl ImageHook for Generator {
    fn apply(&self, image: &Image, _prompt: &str) -> Result<Image, HookError> {
        let mut n = self.calls.lock().unwrap();
        let round = *n;
        *n += 1;
        if Some(round) == self.fail_on {
            return Err(HookError::Failed("out of memory".into()));
        }
        Ok(image.map(|v| (v + 0.05).min(1.0)))
    }
}

struct Scores(Mutex<Vec<Option<f64>>>);

impl Critic for Scores {
    fn critique(&self, _: &Image, prompt: &str) -> Result<CriticVerdict, HookError> {
        match self.0.lock().unwrap().remove(0) {
            Some(score) => Ok(CriticVerdict {
                score,
                prompt: format!("{prompt}+"),
                feedback: String::new(),
            }),
            None => Err(HookError::Failed("critic down".into())),
        }
    }
}

fn settings(dir: &std::path::Path, max_rounds: usize) -> RefineSettings {
    RefineSettings {
        max_rounds,
        panorama_height: 4,
        session_dir: dir.to_path_buf(),
    }
}

#[test]
fn zero_rounds_gives_a_single_round() {
    let tmp = tempfile::tempdir().unwrap();
    let critic = Scores(Mutex::new(vec![Some(0.1)]));
    let out = run_refinement("p", &Generator::new(None), Some(&critic), &settings(tmp.path(), 0)).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best.round, 0);
    assert!(tmp.path().join("round_000.png").is_file());
}

#[test]
fn best_round_is_the_argmax() {
    let tmp = tempfile::tempdir().unwrap();
    let critic = Scores(Mutex::new(vec![Some(0.3), Some(0.5), Some(0.4)]));
    let out = run_refinement("p", &Generator::new(None), Some(&critic), &settings(tmp.path(), 2)).unwrap();
    assert_eq!(out.best.round, 1);
    let prompts: Vec<_> = out.history.iter().map(|r| r.prompt.as_str()).collect();
    assert_eq!(prompts, ["p", "p+", "p++"]);
}

#[test]
fn critic_failure_at_round_two_keeps_rounds_zero_and_one() {
    let tmp = tempfile::tempdir().unwrap();
    let critic = Scores(Mutex::new(vec![Some(0.6), Some(0.2), None]));
    let out = run_refinement("p", &Generator::new(None), Some(&critic), &settings(tmp.path(), 3)).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best.round, 0);
    assert!(out.critic_error.as_deref().unwrap().contains("round 2"));
    assert_eq!(replay_session(tmp.path()).unwrap(), out.best);
}

#[test]
fn critic_failure_at_round_zero_still_returns_round_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let critic = Scores(Mutex::new(vec![None]));
    let out = run_refinement("p", &Generator::new(None), Some(&critic), &settings(tmp.path(), 3)).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best.critic_score, None);
}

#[test]
fn generator_failure_carries_the_partial_history() {
    let tmp = tempfile::tempdir().unwrap();
    let critic = Scores(Mutex::new(vec![Some(0.1), Some(0.9), Some(0.5)]));
    let err = run_refinement("p", &Generator::new(Some(1)), Some(&critic), &settings(tmp.path(), 3)).unwrap_err();
    assert!(matches!(err, RefineError::Generator { round: 1, .. }));
    assert_eq!(err.history().len(), 1);
    assert_eq!(replay_session(tmp.path()).unwrap().round, 0);
}

#[test]
fn without_a_critic_one_round_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_refinement("p", &Generator::new(None), None, &settings(tmp.path(), 3)).unwrap();
    assert_eq!(out.history.len(), 1);
}

#[test]
fn deterministic_hooks_give_identical_logs() {
    let run = || {
        let tmp = tempfile::tempdir().unwrap();
        let critic = Scores(Mutex::new(vec![Some(0.3), Some(0.3), Some(0.7), Some(0.1)]));
        run_refinement("a hall", &Generator::new(None), Some(&critic), &settings(tmp.path(), 3)).unwrap();
        let mut files = vec![std::fs::read(session_log_path(tmp.path())).unwrap()];
        for r in 0..4 {
            files.push(std::fs::read(tmp.path().join(format!("round_{r:03}.png"))).unwrap());
        }
        files
    };
    assert_eq!(run(), run());
}

#[test]
fn selection_prefers_scored_and_earliest() {
    let round = |round, score| RefinementRound {
        round,
        prompt: String::new(),
        panorama_path: "x.png".into(),
        critic_score: score,
        critic_feedback: None,
    };
    let h = vec![round(0, None), round(1, Some(0.2)), round(2, Some(0.2))];
    assert_eq!(select_best(&h).unwrap().round, 1);
    assert_eq!(select_best(&[round(0, None), round(1, None)]).unwrap().round, 0);
    assert!(select_best(&[]).is_none());
}
