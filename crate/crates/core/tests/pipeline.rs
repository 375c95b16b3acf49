use cap_core::audit::{run_audit, DeltaRule, RunSeeds};
use cap_core::datagen::{generate_synthetic, SyntheticConfig};
use cap_core::models::{ModelConfig, Seq2SeqModel};
use cap_core::training::{train_prompter, train_target, PruningOptions, TrainOptions};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        in_features: 2,
        out_features: 2,
        in_len: 3,
        out_len: 3,
        dropout: 0.1,
    }
}

fn opts(seed: u64) -> TrainOptions {
    TrainOptions {
        max_epochs: 4,
        batch_size: 8,
        lr: 1e-2,
        seed,
        es_patience: 2,
    }
}

fn run(seed: u64) -> ([u8; 32], [u8; 32], String) {
    let bundle = generate_synthetic(&SyntheticConfig {
        n_per_subset: 48,
        n_copyrighted: 16,
        features: 2,
        seq_len: 6,
        overlap: false,
        seed: 5,
    })
    .unwrap()
    .normalized();
    let pairs = |s: &[cap_core::datagen::SequenceSample]| {
        s.iter().map(|x| (x.key.clone(), x.value.clone())).collect::<Vec<_>>()
    };
    let (phi, _) = train_target::<f32>(&tiny(), &pairs(&bundle.d_tr), &pairs(&bundle.d_v), &opts(seed)).unwrap();
    let values: Vec<_> = bundle.d2().iter().map(|s| s.value.clone()).collect();
    let (theta, _) = train_prompter::<f32>(
        &tiny().swapped(),
        &phi,
        &values,
        &opts(seed),
        Some(&PruningOptions::gpd(1, 1.0)),
    )
    .unwrap();
    let seeds = RunSeeds {
        data: 5,
        target: seed,
        prompter: seed,
    };
    let report = run_audit(&theta, &phi, &bundle.d2(), DeltaRule::default(), &[5, 10], "t", seeds, true).unwrap();
    (phi.param_digest(), theta.param_digest(), serde_json::to_string(&report).unwrap())
}

#[test]
fn same_seed_reproduces_models_and_report() {
    assert_eq!(run(3), run(3));
}

#[test]
fn different_seed_changes_models() {
    let (a, b) = (run(3), run(4));
    assert_ne!(a.0, b.0);
    assert_ne!(a.1, b.1);
}

#[test]
fn untrained_target_is_rejected() {
    let phi = Seq2SeqModel::<f32>::build(tiny(), 0).unwrap();
    let values = vec![ndarray::Array2::zeros((3, 2)); 4];
    let result = std::panic::catch_unwind(|| {
        train_prompter::<f32>(&tiny().swapped(), &phi, &values, &opts(0), None)
    });
    let msg = result.err().and_then(|e| e.downcast_ref::<String>().cloned()).unwrap_or_default();
    assert!(msg.contains("frozen"), "{msg}");
}
