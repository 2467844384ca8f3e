use dapt_core::gradcheck::check_gradients;
use dapt_core::mlm::{mask_batch, mlm_loss, stream_rng, MaskingConfig};
use dapt_core::model::{ClassifierNet, EncoderConfig, Encoder, MlmModel, ParamSet};
use dapt_core::tokenizer::{TokenSequence, CLS_ID, SEP_ID};
use ndarray::Array2;

fn tiny(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        hidden: 8,
        layers: 2,
        heads: 2,
        intermediate: 12,
        max_positions: 8,
        layer_norm_eps: 1e-5,
    }
}

const STEP: f64 = 1e-5;
/// With losses of order one, central differences at this step carry about
/// 1e-11 of rounding noise, so entries below 1e-6 are compared absolutely.
const FLOOR: f64 = 1e-6;

const IDS: [u32; 7] = [CLS_ID, 7, 12, 5, 9, 7, SEP_ID];

#[test]
fn uniform_logits_give_log_vocab() {
    for v in [2usize, 10, 30_522] {
        let seq = TokenSequence { ids: vec![CLS_ID, 5, 6, 7, 8, SEP_ID] };
        let cfg = MaskingConfig { mask_prob: 1.0, ..Default::default() };
        let mb = mask_batch(&[seq], v.max(9), &cfg, &mut stream_rng(1, 1));
        let logits = vec![Array2::from_elem((6, v.max(9)), 0.37)];
        let loss = mlm_loss(&logits, &mb).unwrap();
        assert_eq!(loss.labeled, 4);
        assert!((loss.value - (v.max(9) as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn mlm_gradient_matches_finite_differences() {
    let mut model = MlmModel::init(tiny(16), &mut stream_rng(5, 0)).unwrap();
    // Initial weights are so small that attention is nearly uniform and its
    // gradients vanish into rounding noise; larger weights exercise every path.
    model.scale(5.0);
    assert!(model.num_params() <= 5_000, "{} parameters", model.num_params());
    let targets = [(1usize, 7u32), (3, 5), (4, 11)];
    let mut grad = model.zeros_like();
    model.accumulate_gradient(&IDS, &targets, &mut grad).unwrap();
    let loss = |m: &MlmModel| {
        let mut scratch = m.zeros_like();
        m.accumulate_gradient(&IDS, &targets, &mut scratch).unwrap().total
    };
    let report = check_gradients(&model, &grad, loss, STEP, FLOOR);
    assert_eq!(report.checked, model.num_params());
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let encoder = Encoder::init(tiny(16), &mut stream_rng(6, 0)).unwrap();
    let mut net = ClassifierNet::new(encoder, &mut stream_rng(6, 1));
    net.scale(5.0);
    assert!(net.num_params() <= 5_000);
    for class in [0, 1] {
        let mut grad = net.zeros_like();
        net.accumulate_gradient(&IDS, class, &mut grad).unwrap();
        let loss = |n: &ClassifierNet| {
            let mut scratch = n.zeros_like();
            n.accumulate_gradient(&IDS, class, &mut scratch).unwrap()
        };
        let report = check_gradients(&net, &grad, loss, STEP, FLOOR);
        assert!(report.max_relative_error <= 1e-4, "class {class}: {report:?}");
    }
}
