use rftf::bc::{train_bc, BcConfig};
use rftf::demos::{export_state_only, generate_demos, Split};
use rftf::env::{EnvVariant, Task, VariantId};
use rftf::plots::{is_non_decreasing, smooth, SMOOTHING_WINDOW};
use rftf::policy::DiscretePolicy;
use rftf::tensor::Activation;
use rftf::value::{score_episode, score_states, train_value_model, ValueConfig, ValueModel};

fn abc() -> Vec<EnvVariant> {
    [VariantId::A, VariantId::B, VariantId::C].map(EnvVariant::builtin).to_vec()
}

#[test]
fn bc_checkpoint_feeds_policy_and_value_init() {
    let train = generate_demos(&abc()[..1], &[Task::ReachTarget], 2, 0, Split::Train).unwrap();
    let cfg = BcConfig { hidden_dims: vec![12], epochs: 1, bins_per_dim: 9, ..BcConfig::default() };
    let bc = train_bc(&train, None, &cfg).unwrap().policy;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bc.ckpt");
    bc.save(&path, 0, 1).unwrap();
    let loaded = DiscretePolicy::load(&path).unwrap();
    assert_eq!(loaded, bc);
    let vm = ValueModel::from_policy_trunk(&loaded, &mut rand_chacha::ChaCha8Rng::from_seed_u64(3)).unwrap();
    assert_eq!(vm.params.segment("trunk.0.weight"), bc.params.segment("trunk.0.weight"));
    assert!(ValueModel::load(&path).is_err());
}

trait SeedU64 {
    fn from_seed_u64(s: u64) -> Self;
}

impl SeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(s: u64) -> Self {
        rand::SeedableRng::seed_from_u64(s)
    }
}

#[test]
fn trained_values_rise_on_demos_and_fall_on_regress() {
    let train = export_state_only(&generate_demos(&abc(), &Task::ALL, 8, 1, Split::Train).unwrap());
    let holdout = export_state_only(&generate_demos(&abc(), &Task::ALL, 2, 1, Split::Val).unwrap());
    let cfg = ValueConfig { hidden_dims: vec![32, 32], activation: Activation::Tanh, epochs: 3, seed: 1, ..ValueConfig::default() };
    let out = train_value_model(&train, Some(&holdout), None, &cfg).unwrap();
    assert_eq!(out.per_epoch.len(), 3);
    assert_eq!(out.selected, out.per_epoch[0]);
    let losses = &out.first_epoch_batch_losses;
    assert!(losses.last().unwrap() < &losses[0]);
    let dir = tempfile::tempdir().unwrap();
    for m in &out.per_epoch {
        let p = dir.path().join(format!("value_e{}.ckpt", m.epoch));
        m.save(&p, 1).unwrap();
        assert_eq!(&ValueModel::load(&p).unwrap(), m);
    }
    let model = out.per_epoch.last().unwrap();
    assert!(out.metrics.last().unwrap().holdout_pairwise_accuracy > 0.8);

    // a demo played backwards undoes progress, so its values must drop somewhere
    let demo = holdout.trajectories.iter().find(|t| t.success).unwrap();
    let mut reversed = demo.observations.clone();
    reversed.reverse();
    let v = score_states(model, &reversed, &demo.instruction).unwrap();
    assert!(v.windows(2).any(|w| w[1] < w[0]));

    let rising = holdout
        .trajectories
        .iter()
        .filter(|t| is_non_decreasing(&smooth(&score_episode(model, t).unwrap(), SMOOTHING_WINDOW)))
        .count();
    assert!(rising * 10 >= holdout.trajectories.len() * 7, "{rising}/{}", holdout.trajectories.len());
}
