use std::path::PathBuf;

use afnet::checkpoint::{Checkpoint, FORMAT_VERSION};
use afnet::config::ExperimentConfig;
use afnet::layers::Module;
use afnet::model::Model;
use afnet::runner::run_train;
use afnet::stage::Control;
use afnet::training::Trainer;
use afnet::{Error, RngState};

fn trained() -> (ExperimentConfig, Trainer<f32>) {
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset.train_size = 16;
    cfg.dataset.eval_size = 8;
    cfg.training.batch_size = 8;
    let (train, _) = cfg.datasets().unwrap();
    let model = Model::<f32>::build(cfg.model.clone(), &mut cfg.model_rng()).unwrap();
    let mut t = Trainer::new(model, cfg.train_config(), cfg.navigation.schedule(), train.len()).unwrap();
    t.train_epoch(&train).unwrap();
    (cfg, t)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, t) = trained();
    let ck = Checkpoint::from_trainer(&t);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.state.epoch, 1);
    assert_eq!(back.state.step, t.step);

    let fresh = Model::<f32>::build(cfg.model.clone(), &mut RngState::new(99)).unwrap();
    back.restore_model(&fresh).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = (t.model.state_vec(), fresh.state_vec());
    assert_eq!(a, b);

    let (eval, _) = cfg.datasets().unwrap();
    let batch = eval.batch::<f32>(&[0, 1]).unwrap();
    let ctl = Control::eval();
    let pa = t.model.forward(&batch.frames, &ctl, &mut RngState::new(0)).unwrap().0.video_logits.to_vec();
    let pb = fresh.forward(&batch.frames, &ctl, &mut RngState::new(0)).unwrap().0.video_logits.to_vec();
    assert_eq!(pa, pb);
}

trait StateVec {
    fn state_vec(&self) -> Vec<(String, Vec<u32>)>;
}

impl StateVec for Model<f32> {
    fn state_vec(&self) -> Vec<(String, Vec<u32>)> {
        self.parameters().into_iter().map(|(n, p)| (n, p.to_vec().iter().map(|v| v.to_bits()).collect())).collect()
    }
}

#[test]
fn other_versions_and_damage_are_refused() {
    let (_, t) = trained();
    let bytes = Checkpoint::from_trainer(&t).to_bytes();
    let text = String::from_utf8_lossy(&bytes[..40]).to_string();
    let first = text.lines().next().unwrap().to_string();
    let bumped = first.replace(&FORMAT_VERSION.to_string(), &(FORMAT_VERSION + 1).to_string());
    let mut other = bumped.into_bytes();
    other.extend_from_slice(&bytes[first.len()..]);
    let err = Checkpoint::from_bytes(&other).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)) && err.to_string().contains("version"), "{err}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"garbage").is_err());
}

#[test]
fn restoring_into_a_different_shape_fails() {
    let (cfg, t) = trained();
    let ck = Checkpoint::from_trainer(&t);
    let mut other = cfg.model.clone();
    other.classes += 1;
    let model = Model::<f32>::build(other, &mut RngState::new(0)).unwrap();
    assert!(ck.restore_model(&model).is_err());
}

#[test]
fn unknown_config_keys_are_rejected_with_a_location() {
    let text = ExperimentConfig::desk().to_json().replacen("\"seed\": 0", "\"seed\": 0,\n  \"sed\": 1", 1);
    let err = ExperimentConfig::from_json(&text, "x.json").unwrap_err().to_string();
    assert!(err.contains("x.json:") && err.contains("unknown field `sed`"), "{err}");

    let nested = ExperimentConfig::desk().to_json().replacen("\"noise\"", "\"nois\"", 1);
    assert!(ExperimentConfig::from_json(&nested, "y.json").is_err());
}

#[test]
fn config_json_round_trips() {
    let cfg = ExperimentConfig::desk();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json(), "desk").unwrap(), cfg);
}

/// Set `AFNET_BLESS=1` to rewrite the shipped file from the built-in value.
#[test]
fn shipped_desk_config_matches_the_builtin() {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "desk.json"].iter().collect();
    if std::env::var_os("AFNET_BLESS").is_some() {
        std::fs::write(&path, ExperimentConfig::desk().to_json()).unwrap();
    }
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::desk());
}

#[test]
fn interrupted_training_resumes_bit_for_bit() {
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset.train_size = 16;
    cfg.dataset.eval_size = 8;
    cfg.training.batch_size = 8;
    cfg.training.epochs = 2;
    let dir = tempfile::tempdir().unwrap();
    let (whole, part) = (dir.path().join("whole"), dir.path().join("part"));
    run_train(&cfg, &whole, None).unwrap();

    let (train, _) = cfg.datasets().unwrap();
    let model = Model::<f32>::build(cfg.model.clone(), &mut cfg.model_rng()).unwrap();
    let mut t = Trainer::new(model, cfg.train_config(), cfg.navigation.schedule(), train.len()).unwrap();
    t.train_epoch(&train).unwrap();
    std::fs::create_dir_all(&part).unwrap();
    let ck = part.join("epoch1.ckpt");
    Checkpoint::from_trainer(&t).save(&ck).unwrap();
    run_train(&cfg, &part, Some(&ck)).unwrap();

    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(whole.join("checkpoint.ckpt")), read(part.join("checkpoint.ckpt")));
    assert_eq!(read(whole.join("selection.csv")), read(part.join("selection.csv")));
    let second = |p: PathBuf| String::from_utf8(read(p)).unwrap().lines().filter(|l| l.starts_with("1,")).map(String::from).collect::<Vec<_>>();
    assert_eq!(second(whole.join("metrics.csv")), second(part.join("metrics.csv")));
}
