use parapath::backbone::{detokenize, tokenize, ModelConfig, TokenVocab};
use parapath::nn::{bind, gradients, leaves};
use parapath::parallel::ModelParams;
use parapath::tensor::{DenseArray, Tape};
use proptest::prelude::*;

fn config(prefix_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        max_len: 16,
        ffn_hidden: 16,
        num_paths: 2,
        prefix_len,
        ..Default::default()
    }
}

fn states(model: &ModelParams, tokens: &[usize], path: Option<usize>) -> DenseArray {
    let tape = Tape::new();
    let bound = bind(model, &tape, false);
    bound.encoder().hidden_states(tokens, path).unwrap().to_array()
}

#[test]
fn later_tokens_do_not_change_earlier_states() {
    let model = ModelParams::init(&config(3), 0).unwrap();
    let a = states(&model, &[5, 6, 7, 8], Some(0));
    let b = states(&model, &[5, 6, 9, 10], Some(0));
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn paths_are_isolated() {
    let mut model = ModelParams::init(&config(3), 0).unwrap();
    let tokens = [1, 2, 3];
    let before = states(&model, &tokens, Some(0));
    for k in model.prefixes.keys.iter_mut().skip(model.config.layers) {
        k.values_mut().iter_mut().for_each(|v| *v *= 50.0);
    }
    assert!(states(&model, &tokens, Some(0)).bit_eq(&before));
    assert!(!states(&model, &tokens, Some(1)).bit_eq(&before));
}

#[test]
fn gradient_only_reaches_the_chosen_paths_prefix() {
    let model = ModelParams::init(&config(2), 0).unwrap();
    let tape = Tape::new();
    let bound = bind(&model, &tape, true);
    let h = bound.encoder().encode_path(&[4, 5, 6], 1).unwrap();
    tape.backward(h.sum()).unwrap();
    let names: Vec<String> = leaves(&model).into_iter().map(|t| t.name).collect();
    let (mut silent, mut reached) = (0, 0);
    for (name, g) in names.iter().zip(gradients(&bound)) {
        if name.starts_with("model.prefixes.0.") || name.starts_with("model.aggregator") {
            assert!(g.is_none_or(|g| g.values().iter().all(|v| *v == 0.0)), "{name}");
            silent += 1;
        } else if name.starts_with("model.prefixes.1.") {
            assert!(g.is_some_and(|g| g.l2_norm() > 0.0), "{name}");
            reached += 1;
        }
    }
    assert_eq!(reached, 2 * model.config.layers);
    assert!(silent > 2 * model.config.layers);
}

#[test]
fn empty_prefix_equals_no_prefix_exactly() {
    let model = ModelParams::init(&config(0), 3).unwrap();
    let tokens = [9, 8, 7, 6];
    let none = states(&model, &tokens, None);
    for p in 0..2 {
        assert!(states(&model, &tokens, Some(p)).bit_eq(&none));
    }
}

#[test]
fn copied_prefixes_give_identical_paths() {
    let mut model = ModelParams::init(&config(4), 1).unwrap();
    model.prefixes.copy_path(0, 1).unwrap();
    let tokens = [3, 1, 4, 1, 5];
    assert!(states(&model, &tokens, Some(0)).bit_eq(&states(&model, &tokens, Some(1))));
}

#[test]
fn dominant_prefix_pulls_attention_onto_its_values() {
    // A huge prefix key aligned with every query makes the prefix absorb all
    // attention mass, so the first attention output equals the prefix value
    // row pushed through the output projection.
    let mut c = config(1);
    c.layers = 1;
    c.heads = 1;
    let mut model = ModelParams::init(&c, 2).unwrap();
    let tokens = [7usize, 11];
    let tape = Tape::new();
    let bound = bind(&model, &tape, false);
    let layer = &model.backbone.layers[0];
    let x = bound.backbone.token_embedding.gather_rows(&tokens).unwrap();
    let x = x.add(&bound.backbone.position_embedding.gather_rows(&[0, 1]).unwrap()).unwrap();
    let normed = bound.backbone.layers[0].attn_norm.forward(&x).unwrap().to_array();
    // choose the key so q·k is large and positive at both positions
    let q = {
        let t = Tape::new();
        t.constant(normed.clone()).matmul(&t.constant(layer.wq.clone())).unwrap().to_array()
    };
    let key: Vec<f64> = (0..c.d_model).map(|j| (q.get(&[0, j]) + q.get(&[1, j])).signum() * 1e4).collect();
    model.prefixes.keys[0] = DenseArray::matrix(1, c.d_model, key).unwrap();
    let value: Vec<f64> = (0..c.d_model).map(|j| j as f64 * 0.1 - 0.3).collect();
    model.prefixes.values[0] = DenseArray::matrix(1, c.d_model, value.clone()).unwrap();

    let tape = Tape::new();
    let bound = bind(&model, &tape, false);
    let a = tape.constant(normed);
    let out = bound.encoder().attention_with_prefix(&a, 0, Some(0)).unwrap().to_array();
    let expected = {
        let t = Tape::new();
        t.constant(DenseArray::matrix(1, c.d_model, value).unwrap())
            .matmul(&t.constant(layer.wo.clone()))
            .unwrap()
            .to_array()
    };
    for row in 0..2 {
        for j in 0..c.d_model {
            assert!((out.get(&[row, j]) - expected.get(&[0, j])).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn tokenize_round_trips(text in "[ -~]{1,40}") {
        let ids = tokenize(&text, &TokenVocab::new(64)).unwrap();
        prop_assert_eq!(detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn states_are_finite(tokens in proptest::collection::vec(0usize..256, 1..16), path in 0usize..2) {
        let model = ModelParams::init(&config(2), 7).unwrap();
        prop_assert!(states(&model, &tokens, Some(path)).all_finite());
    }
}

#[test]
fn distinct_prefixes_give_distinct_embeddings_at_init() {
    let model = ModelParams::init(&config(20), 11).unwrap();
    let tape = Tape::new();
    let bound = bind(&model, &tape, false);
    let paths = bound.encoder().encode_all_paths(&[72, 105, 33]).unwrap();
    assert_eq!(paths.len(), 2);
    let (a, b) = (paths[0].to_array(), paths[1].to_array());
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    assert!(dot / (a.l2_norm() * b.l2_norm()) < 1.0 - 1e-6);
}

#[test]
fn pooling_reads_the_last_real_token() {
    let model = ModelParams::init(&config(3), 4).unwrap();
    let tape = Tape::new();
    let bound = bind(&model, &tape, false);
    let enc = bound.encoder();
    for tokens in [vec![1, 2], vec![1, 2, 3]] {
        let all = enc.hidden_states(&tokens, Some(1)).unwrap().to_array();
        let pooled = enc.encode_path(&tokens, 1).unwrap().to_array();
        assert_eq!(pooled.shape(), &[1, 8]);
        assert_eq!(pooled.values(), all.row(tokens.len() - 1));
    }
}

#[test]
fn augmented_keys_and_values_stack_prefix_rows() {
    let tape = Tape::new();
    let k = tape.constant(DenseArray::zeros(&[4, 8]));
    let v = tape.constant(DenseArray::ones(&[4, 8]));
    let pk = tape.constant(DenseArray::filled(&[20, 8], 2.0));
    let pv = tape.constant(DenseArray::filled(&[20, 8], 3.0));
    let (ka, va) = parapath::backbone::augment_keys_values(&k, &v, Some((&pk, &pv))).unwrap();
    assert_eq!((ka.shape(), va.shape()), (vec![24, 8], vec![24, 8]));
    assert_eq!(ka.to_array().get(&[19, 0]), 2.0);
    assert_eq!(va.to_array().get(&[20, 0]), 1.0);
    let (k0, _) = parapath::backbone::augment_keys_values(&k, &v, None).unwrap();
    assert_eq!(k0.shape(), vec![4, 8]);
}
