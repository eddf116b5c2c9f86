use mexgan::data::synthetic_dataset;
use mexgan::metrics::report::{evaluate_detailed, EvalOptions};
use mexgan::training::{epoch_samples, GeneratorArch, TrainConfig, TrainState, Variant};

fn cfg(parallel: bool) -> TrainConfig {
    TrainConfig {
        variant: Variant::Mex,
        epochs: 1,
        decay_start: 1,
        generator: GeneratorArch {
            downsamples: 1,
            res_blocks: 1,
            base_width: 6,
        },
        disc_width: 6,
        parallel,
        ..TrainConfig::default()
    }
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let data = synthetic_dataset(8, 32, 32, 11, false);
    let samples = epoch_samples(&data, &cfg(true), 0).unwrap();
    let mut a = TrainState::new(cfg(true), Some(data.palette.clone())).unwrap();
    let mut b = TrainState::new(cfg(false), Some(data.palette.clone())).unwrap();
    for batch in samples.chunks(4) {
        assert_eq!(a.train_step(batch).unwrap(), b.train_step(batch).unwrap());
    }
    assert_eq!(a.models, b.models);
}

#[test]
fn sequential_and_parallel_evaluation_agree_bitwise() {
    let test = synthetic_dataset(6, 32, 32, 12, false);
    let c = cfg(true);
    let s = TrainState::new(c.clone(), Some(test.palette.clone())).unwrap();
    let run = |parallel| {
        let opts = EvalOptions {
            parallel,
            ..EvalOptions::default()
        };
        evaluate_detailed(&s.models.generator, &c, &test.palette, &test, &opts).unwrap()
    };
    assert_eq!(run(true), run(false));
}
