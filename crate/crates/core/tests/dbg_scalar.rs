use dscm::config::GraphConfig;
use dscm::distributions::Prng;
use dscm::synthdata;
use dscm::train;

const FULL_SCALARS: &str = r#"{
  "name": "full-scalars",
  "nodes": [
    {"name": "t", "mechanism": {"kind": "flow", "base": {"kind": "standard-normal"},
      "transforms": [
        {"kind": "spline", "bins": 8, "half_range": 3.0},
        {"kind": "affine-normalisation", "bounds": "singly"},
        {"kind": "exp"}]}},
    {"name": "i", "parents": ["t"], "mechanism": {"kind": "flow", "base": {"kind": "standard-normal"},
      "transforms": [
        {"kind": "conditional-affine", "context": {"hidden": [], "activation": "linear"}},
        {"kind": "sigmoid"},
        {"kind": "affine-normalisation", "bounds": "doubly"}]}}
  ],
  "training": {"seed": 1, "batch_size": 256, "epochs": 30, "particles": 1,
    "lr_flows": 0.005, "lr_encoder_decoder": 0.0001}
}"#;

const INDEP_SCALARS: &str = r#"{
  "name": "independent-scalars",
  "nodes": [
    {"name": "t", "mechanism": {"kind": "flow", "base": {"kind": "standard-normal"},
      "transforms": [
        {"kind": "spline", "bins": 8, "half_range": 3.0},
        {"kind": "affine-normalisation", "bounds": "singly"},
        {"kind": "exp"}]}},
    {"name": "i", "mechanism": {"kind": "flow", "base": {"kind": "standard-normal"},
      "transforms": [
        {"kind": "affine"},
        {"kind": "spline", "bins": 8, "half_range": 3.0},
        {"kind": "sigmoid"},
        {"kind": "affine-normalisation", "bounds": "doubly"}]}}
  ],
  "training": {"seed": 1, "batch_size": 256, "epochs": 30, "particles": 1,
    "lr_flows": 0.005, "lr_encoder_decoder": 0.0001}
}"#;

#[test]
fn dbg() {
    let t0 = std::time::Instant::now();
    let train_rec = synthdata::generate_records(1000, synthdata::Split::Train, 0..60_000);
    let val_rec = synthdata::generate_records(1000, synthdata::Split::Val, 0..10_000);
    let test_rec = synthdata::generate_records(1000, synthdata::Split::Test, 0..10_000);
    println!("gen: {:.1}s", t0.elapsed().as_secs_f64());
    let train_obs = synthdata::records_to_observation(&train_rec, false).unwrap();
    let val_obs = synthdata::records_to_observation(&val_rec, false).unwrap();
    let test_obs = synthdata::records_to_observation(&test_rec, false).unwrap();
    for raw in [FULL_SCALARS, INDEP_SCALARS] {
        let t1 = std::time::Instant::now();
        let cfg = GraphConfig::parse(raw).unwrap();
        let resolved = cfg.resolve(&train_obs).unwrap();
        let scm = resolved.build(Some(&train_obs), &mut Prng::seed_from(resolved.training.seed)).unwrap();
        let out = train::train(&scm, &train_obs, &val_obs, &resolved.training, 0, |_| {}).unwrap();
        train::restore(&train::all_parameters(&scm), &out.best_params).unwrap();
        let per = scm.per_node_objective(&test_obs, 1, &mut Prng::seed_from(9)).unwrap();
        println!(
            "{}: log p(t) = {:.4}, log p(i|pa) = {:.4}  [{:.1}s, best epoch {:?}]",
            resolved.name, per["t"], per["i"], t1.elapsed().as_secs_f64(), out.best_epoch
        );
    }
}
