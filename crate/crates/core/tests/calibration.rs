mod common;

use common::*;
use noisemix::data::{generate_synthetic, SyntheticRecipe};
use noisemix::error::Error;
use noisemix::model::{EncoderKind, ModelConfig};
use noisemix::trainer::{train_baseline, Method, TrainConfig};

#[test]
fn clean_synthetic_data_is_learnable() {
    let (train, test) = generate_synthetic(&SyntheticRecipe::default()).unwrap();
    let mc = ModelConfig { encoder_kind: EncoderKind::ToyCnn, input_height: 16, input_width: 16, ..ModelConfig::default() };
    let cfg = TrainConfig { method: Method::DefaultBaseline, ..short_train(0, 20, 0) };
    let st = train_baseline(&train, &mc, &cfg, Some(&test)).unwrap();
    let acc = last3(&st.history);
    assert!(acc >= 95.0, "clean accuracy {acc}");
}

#[test]
fn indistinguishable_classes_fail_calibration() {
    let base = SyntheticRecipe::default();
    let shapes = vec![base.class_shapes()[0]; 2];
    let r = SyntheticRecipe { num_classes: 2, shapes, ..base };
    assert!(matches!(generate_synthetic(&r), Err(Error::Calibration(_))));
}
