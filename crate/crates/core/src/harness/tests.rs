use super::*;
use crate::training::{GrowOptions, GrowthMethod, WarmupConfig};
use crate::transformer::{init_random, ModelConfig};

fn tiny() -> Experiment {
    let spec = TaskSpec {
        seq_len: 12,
        eval_windows: 16,
        eval_batch_size: 8,
        ..TaskSpec::new(TaskKind::CharLm)
    };
    let task = Task::new(&spec).unwrap();
    let v = task.vocab();
    let budget = TrainBudget {
        max_steps: 12,
        batch_size: 4,
        lr: 3e-3,
        eval_every: 4,
        weight_decay: 0.0,
    };
    Experiment {
        small: ModelConfig::new(1, 8, 2, v, 12),
        target: ModelConfig::new(2, 12, 2, v, 12),
        task,
        small_budget: budget.clone(),
        target_budget: budget,
        warmup: WarmupConfig { steps: 3, batch_size: 4, ..WarmupConfig::default() },
        grow: GrowOptions::default(),
    }
}

#[test]
fn threshold_at_initial_loss_stops_at_step_zero() {
    let e = tiny();
    let w = init_random(&e.target, 0).unwrap();
    let l0 = e.task.eval_loss(&w, &e.target).unwrap();
    let run = train_to_threshold(&w, &e.target, &e.task, Some(l0), &e.target_budget, 0, "x", 777).unwrap();
    assert_eq!(run.ledger.steps(), 0);
    assert_eq!(run.ledger.cumulative, 777);
    assert_eq!(run.ledger.flops_to_threshold, Some(777.0));
    assert!(run.ledger.converged);
    assert_eq!(run.weights, w);
}

#[test]
fn runs_are_deterministic_and_additive() {
    let e = tiny();
    let w = init_random(&e.target, 1).unwrap();
    let a = train_to_threshold(&w, &e.target, &e.task, None, &e.target_budget, 5, "scratch", 0).unwrap();
    let b = train_to_threshold(&w, &e.target, &e.task, None, &e.target_budget, 5, "scratch", 0).unwrap();
    assert_eq!(a.ledger, b.ledger);
    assert_eq!(a.curve, b.curve);
    assert!(a.ledger.is_consistent());
    assert_eq!(a.ledger.steps(), 12);
    assert_eq!(a.curve.iter().map(|p| p.step).collect::<Vec<_>>(), [0, 4, 8, 12]);
    assert!(a.curve.windows(2).all(|w| w[0].cum_flops < w[1].cum_flops));
    let unreachable = train_to_threshold(&w, &e.target, &e.task, Some(-1.0), &e.target_budget, 5, "s", 0).unwrap();
    assert!(!unreachable.ledger.converged);
    let zero = TrainBudget { max_steps: 0, ..e.target_budget.clone() };
    assert!(train_to_threshold(&w, &e.target, &e.task, None, &zero, 5, "s", 0).is_err());
}

#[test]
fn random_against_itself_saves_nothing() {
    let e = tiny();
    let (report, runs) = compare_methods(&e, &[GrowthMethod::Random], &[3], None, None).unwrap();
    assert_eq!(runs[0].r, Some(0.0));
    assert_eq!(report.aggregate[0].mean_r, Some(0.0));
}

#[test]
fn compare_writes_one_curve_file_per_method() {
    let e = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (report, runs) = compare_methods(&e, &GrowthMethod::ALL, &[0], None, Some(dir.path())).unwrap();
    assert_eq!(runs.len(), 5);
    for m in GrowthMethod::ALL {
        let text = std::fs::read_to_string(dir.path().join(format!("curves_{}.csv", m.label()))).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,seed,step,train_loss,eval_loss,cum_flops");
        assert!(text.lines().count() > 1);
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["format"], COMPARE_FORMAT);
    assert_eq!(json["runs"].as_array().unwrap().len(), 5);
    let mango = runs.iter().find(|r| r.method == "mango").unwrap();
    assert!(mango.run.ledger.warmup_flops > 0);
    assert_eq!(mango.warmup_losses.len(), 3);
    assert_eq!(report.seeds.len(), 1);
}

#[test]
fn ablation_counts_increase_with_rank() {
    let e = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (report, _) = ablate_ranks(&e, &[1, 2, 3], &[0], None, Some(dir.path())).unwrap();
    assert_eq!(report.format, ABLATION_FORMAT);
    assert!(report.rows.windows(2).all(|w| w[0].param_count < w[1].param_count));
    assert!(report.rows.windows(2).all(|w| w[0].stored_params < w[1].stored_params));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("ablation.json").exists());
}

#[test]
fn mismatched_model_is_rejected() {
    let mut e = tiny();
    e.target.vocab += 1;
    assert!(compare_methods(&e, &[GrowthMethod::Mango], &[0], None, None).is_err());
}
