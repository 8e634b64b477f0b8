use super::*;
use crate::text::{SegmentLabel, BOS, CAPTION, CLS, EOS, STEP, TEMPLATE, TITLE};
use ndarray::Array2;

fn micro_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_dim: 16,
        vocab_size: vocab,
        max_positions: 64,
        dropout_rate: 0.0,
        fuse_every_layer: true,
    }
}

fn seg(label: SegmentLabel, start: usize, end: usize) -> Segment {
    Segment { label, start, end }
}

/// CLS + goal + one (step, caption) pair, hand-assembled.
fn tiny_seq() -> SegmentedSequence {
    SegmentedSequence {
        token_ids: vec![CLS, TITLE, 11, 12, STEP, 13, 14, CAPTION, 15, 11],
        segments: vec![
            seg(SegmentLabel::Cls, 0, 1),
            seg(SegmentLabel::GoalSubgoal, 1, 4),
            seg(SegmentLabel::Step, 4, 7),
            seg(SegmentLabel::Caption, 7, 10),
        ],
    }
}

fn tiny_prep() -> PreparedExample {
    PreparedExample {
        seq: tiny_seq(),
        target: vec![BOS, 12, 14, EOS],
        retrieved: vec![vec![TEMPLATE, 13, 11], vec![TEMPLATE, 15]],
        negatives: vec![vec![BOS, 11, EOS], vec![BOS, 13, 12, EOS]],
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_validation_rejects_bad_dims() {
    let mut c = micro_config(16);
    c.d_model = 9; // not divisible by 2 heads
    assert!(c.validate().is_err());
    let mut c = micro_config(16);
    c.dropout_rate = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn alpha_zero_reproduces_vanilla_encoder() {
    let model = Model::new(micro_config(16), 7).unwrap();
    let seq = tiny_seq();
    let raw = model.encode_raw(&seq.token_ids).unwrap();
    let overrides = GateOverrides { alpha: Some(0.0), ..Default::default() };
    let enc = model.encode_selective_with(&seq, &overrides).unwrap();
    assert!(max_abs_diff(&raw, &enc.hidden) <= 1e-10);
    assert_eq!(enc.alphas, vec![0.0; 3]);
}

#[test]
fn alpha_one_writes_mask_embedding_rows() {
    let model = Model::new(micro_config(16), 7).unwrap();
    let seq = tiny_seq();
    let overrides = GateOverrides { alpha: Some(1.0), ..Default::default() };
    let enc = model.encode_selective_with(&seq, &overrides).unwrap();
    let mask = model.params.get("emb.mask");
    for seg in &enc.segments[1..] {
        for r in seg.start..seg.end {
            for j in 0..model.config.d_model {
                assert_eq!(enc.hidden[[r, j]], mask[[0, j]], "row {r} col {j}");
            }
        }
    }
    // h0 passes through unmasked
    let raw = model.encode_raw(&seq.token_ids).unwrap();
    for j in 0..model.config.d_model {
        assert_eq!(enc.hidden[[0, j]], raw[[0, j]]);
    }
}

#[test]
fn gamma_zero_reproduces_base_decoder() {
    let model = Model::new(micro_config(16), 9).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    let retr = model.encode_retrieved(&enc, &prep.retrieved).unwrap();
    let input = &prep.target[..prep.target.len() - 1];

    let base = model.decode(input, &enc, None).unwrap();
    let overrides = GateOverrides { gamma: Some(0.0), ..Default::default() };
    let gated = model.decode_with(input, &enc, Some(&retr), &overrides).unwrap();
    assert!(max_abs_diff(&base.logits, &gated.logits) <= 1e-10);
    assert!(base.gammas.is_empty());
    assert_eq!(gated.gammas.len(), model.config.n_dec_layers);
}

#[test]
fn empty_retrieval_disables_fusion() {
    let model = Model::new(micro_config(16), 9).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    let empty = model.encode_retrieved(&enc, &[]).unwrap();
    assert!(empty.is_empty());
    let input = &prep.target[..prep.target.len() - 1];
    let with_empty = model.decode(input, &enc, Some(&empty)).unwrap();
    let without = model.decode(input, &enc, None).unwrap();
    assert_eq!(max_abs_diff(&with_empty.logits, &without.logits), 0.0);
    assert!(with_empty.gammas.is_empty());
}

#[test]
fn beta_zero_keeps_raw_retrieved_encodings() {
    let model = Model::new(micro_config(16), 3).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    let overrides = GateOverrides { beta: Some(0.0), ..Default::default() };
    let retr = model.encode_retrieved_with(&enc, &prep.retrieved, &overrides).unwrap();
    let mut row = 0;
    for ids in &prep.retrieved {
        let raw = model.encode_raw(ids).unwrap();
        for i in 0..ids.len() {
            for j in 0..model.config.d_model {
                assert_eq!(retr.hidden[[row + i, j]], raw[[i, j]]);
            }
        }
        row += ids.len();
    }
    assert_eq!(retr.lens, vec![3, 2]);
    assert_eq!(retr.hidden.nrows(), 5);
}

/// Straight-line recomputation of pooling attention + sigmoid gate + blend
/// from the raw encoder bank, with handcrafted single-head weights.
#[test]
fn selective_encoding_matches_straight_line_recomputation() {
    let mut config = micro_config(12);
    config.d_model = 2;
    config.n_heads = 1;
    config.ffn_dim = 4;
    let mut model = Model::new(config, 5).unwrap();
    // handcrafted pooling and gate weights
    *model.params.get_mut("pool.alpha.wq") =
        ndarray::arr2(&[[0.9, -0.3], [0.4, 0.7]]);
    *model.params.get_mut("pool.alpha.wk") = ndarray::arr2(&[[0.2, 0.5], [-0.6, 0.1]]);
    *model.params.get_mut("pool.alpha.wv") = ndarray::arr2(&[[1.1, 0.0], [0.3, -0.8]]);
    *model.params.get_mut("pool.alpha.wo") = ndarray::arr2(&[[0.7, 0.2], [-0.5, 0.9]]);
    *model.params.get_mut("pool.alpha.bq") = ndarray::arr2(&[[0.05, -0.02]]);
    *model.params.get_mut("pool.alpha.bk") = ndarray::arr2(&[[-0.04, 0.03]]);
    *model.params.get_mut("pool.alpha.bv") = ndarray::arr2(&[[0.01, 0.02]]);
    *model.params.get_mut("pool.alpha.bo") = ndarray::arr2(&[[0.0, 0.1]]);
    *model.params.get_mut("gate.alpha.w") = ndarray::arr2(&[[0.6, -0.4, 0.8, 0.3]]);
    *model.params.get_mut("emb.mask") = ndarray::arr2(&[[0.25, -0.75]]);

    let seq = SegmentedSequence {
        token_ids: vec![CLS, TITLE, 7, STEP, 8, 9],
        segments: vec![
            seg(SegmentLabel::Cls, 0, 1),
            seg(SegmentLabel::GoalSubgoal, 1, 3),
            seg(SegmentLabel::Step, 3, 6),
        ],
    };
    let h = model.encode_raw(&seq.token_ids).unwrap();
    let enc = model.encode_selective(&seq).unwrap();

    let p = &model.params;
    let lin = |x: &[f64], w: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
        (0..2)
            .map(|o| x[0] * w[[o, 0]] + x[1] * w[[o, 1]] + b[[0, o]])
            .collect()
    };
    let h0 = [h[[0, 0]], h[[0, 1]]];
    for (s, segm) in seq.segments[1..].iter().enumerate() {
        let q = lin(&h0, p.get("pool.alpha.wq"), p.get("pool.alpha.bq"));
        let mut weights = Vec::new();
        for r in segm.start..segm.end {
            let key = lin(&[h[[r, 0]], h[[r, 1]]], p.get("pool.alpha.wk"), p.get("pool.alpha.bk"));
            weights.push((q[0] * key[0] + q[1] * key[1]) / 2f64.sqrt());
        }
        let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ctx = [0.0, 0.0];
        for (i, r) in (segm.start..segm.end).enumerate() {
            let val = lin(&[h[[r, 0]], h[[r, 1]]], p.get("pool.alpha.wv"), p.get("pool.alpha.bv"));
            ctx[0] += exps[i] / z * val[0];
            ctx[1] += exps[i] / z * val[1];
        }
        let pooled = lin(&ctx, p.get("pool.alpha.wo"), p.get("pool.alpha.bo"));
        let wg = p.get("gate.alpha.w");
        let logit =
            wg[[0, 0]] * h0[0] + wg[[0, 1]] * h0[1] + wg[[0, 2]] * pooled[0] + wg[[0, 3]] * pooled[1];
        let alpha = 1.0 / (1.0 + (-logit).exp());
        assert!((enc.alphas[s] - alpha).abs() < 1e-12, "alpha {s}");
        let mask = p.get("emb.mask");
        for r in segm.start..segm.end {
            for j in 0..2 {
                let want = alpha * mask[[0, j]] + (1.0 - alpha) * h[[r, j]];
                assert!((enc.hidden[[r, j]] - want).abs() < 1e-12);
            }
        }
    }
}

/// With identity value/output projections, pooling a single-token sequence
/// returns exactly that token's hidden state (softmax over one key is 1),
/// so the gate sees [h0; h_token].
#[test]
fn single_token_pooling_collapses_to_its_hidden_state() {
    let mut config = micro_config(16);
    config.d_model = 4;
    config.n_heads = 1;
    let mut model = Model::new(config, 2).unwrap();
    *model.params.get_mut("pool.beta.wv") = Array2::eye(4);
    *model.params.get_mut("pool.beta.bv") = Array2::zeros((1, 4));
    *model.params.get_mut("pool.beta.wo") = Array2::eye(4);
    *model.params.get_mut("pool.beta.bo") = Array2::zeros((1, 4));

    let seq = tiny_seq();
    let enc = model.encode_selective(&seq).unwrap();
    let single = vec![vec![TEMPLATE]];
    let retr = model.encode_retrieved(&enc, &single).unwrap();

    // independent recomputation: beta = sigmoid(W_b [h0; h_token])
    let h_token = model.encode_raw(&[TEMPLATE]).unwrap();
    let wb = model.params.get("gate.beta.w");
    let mut logit = 0.0;
    for j in 0..4 {
        logit += wb[[0, j]] * enc.cls[[0, j]] + wb[[0, 4 + j]] * h_token[[0, j]];
    }
    let beta = 1.0 / (1.0 + (-logit).exp());
    assert!((retr.betas[0] - beta).abs() < 1e-12);
}

#[test]
fn gates_stay_in_open_unit_interval() {
    let model = Model::new(micro_config(16), 21).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    let retr = model.encode_retrieved(&enc, &prep.retrieved).unwrap();
    let dec = model.decode(&prep.target[..3], &enc, Some(&retr)).unwrap();
    for a in &enc.alphas {
        assert!(*a > 0.0 && *a < 1.0);
    }
    for b in &retr.betas {
        assert!(*b > 0.0 && *b < 1.0);
    }
    for layer in &dec.gammas {
        for g in layer {
            assert!(*g > 0.0 && *g < 1.0);
        }
    }
    assert!(dec.logits.iter().all(|v| v.is_finite()));
}

#[test]
fn decoder_is_causal() {
    let model = Model::new(micro_config(16), 11).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    let retr = model.encode_retrieved(&enc, &prep.retrieved).unwrap();
    let a = model.decode(&[BOS, 11, 12, 13], &enc, Some(&retr)).unwrap();
    let b = model.decode(&[BOS, 11, 15, 13], &enc, Some(&retr)).unwrap();
    for q in 0..2 {
        for j in 0..model.config.vocab_size {
            assert_eq!(a.logits[[q, j]], b.logits[[q, j]], "row {q}");
        }
    }
}

#[test]
fn decode_rejects_bad_input() {
    let model = Model::new(micro_config(16), 11).unwrap();
    let prep = tiny_prep();
    let enc = model.encode_selective(&prep.seq).unwrap();
    assert!(model.decode(&[11, 12], &enc, None).is_err()); // no <bos>
    let too_long: Vec<usize> = std::iter::once(BOS).chain(std::iter::repeat(11).take(80)).collect();
    assert!(model.decode(&too_long, &enc, None).is_err());
}

#[test]
fn uniform_logits_loss_is_ln_vocab() {
    let logits = Array2::zeros((3, 7));
    let loss = generation_loss(&logits, &[0, 3, 6]);
    assert!((loss - (7f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_drive_loss_to_zero() {
    let mut logits = Array2::zeros((2, 5));
    logits[[0, 1]] = 50.0;
    logits[[1, 3]] = 50.0;
    let loss = generation_loss(&logits, &[1, 3]);
    assert!(loss < 1e-12);
}

#[test]
fn generation_loss_matches_handcrafted_recomputation() {
    let logits = ndarray::arr2(&[[0.2, -1.0, 0.5, 0.1], [1.5, 0.3, -0.2, 0.0]]);
    let gold = [2usize, 0usize];
    let mut want = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).to_vec();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[g].exp() / z).ln();
    }
    want /= 2.0;
    assert!((generation_loss(&logits, &gold) - want).abs() < 1e-12);
}

#[test]
fn infonce_equal_scores_closed_form() {
    for k in [1usize, 5, 10] {
        let negs = vec![0.37; k];
        let loss = infonce_nll(0.37, &negs, 1.0).unwrap();
        assert!((loss - ((k + 1) as f64).ln()).abs() < 1e-12, "K={k}");
    }
}

#[test]
fn infonce_extreme_scores_closed_form() {
    let loss = infonce_nll(1.0, &[0.0; 5], 1.0).unwrap();
    let want = ((std::f64::consts::E + 5.0) / std::f64::consts::E).ln();
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn infonce_requires_negatives_and_positive_tau() {
    assert!(infonce_nll(0.5, &[], 1.0).is_err());
    assert!(infonce_nll(0.5, &[0.1], 0.0).is_err());
}

#[test]
fn infonce_is_monotone_in_scores() {
    let base = infonce_nll(0.6, &[0.4, 0.5, 0.2], 1.0).unwrap();
    assert!(infonce_nll(0.7, &[0.4, 0.5, 0.2], 1.0).unwrap() < base);
    assert!(infonce_nll(0.6, &[0.55, 0.5, 0.2], 1.0).unwrap() > base);
    assert!(infonce_nll(0.6, &[0.4, 0.5, 0.35], 1.0).unwrap() > base);
}

#[test]
fn total_loss_combines_linearly() {
    let model = Model::new(micro_config(16), 13).unwrap();
    let prep = tiny_prep();
    let zero = model.loss_only(&prep, &ForwardOptions { lambda: 0.0, ..Default::default() }).unwrap();
    assert_eq!(zero.total, zero.gen);
    assert_eq!(zero.contrastive, 0.0);
    let half = model.loss_only(&prep, &ForwardOptions { lambda: 0.5, ..Default::default() }).unwrap();
    assert!((half.total - (half.gen + 0.5 * half.contrastive)).abs() < 1e-12);
    assert!((half.gen - zero.gen).abs() < 1e-12);
}

#[test]
fn lambda_without_negatives_is_rejected() {
    let model = Model::new(micro_config(16), 13).unwrap();
    let mut prep = tiny_prep();
    prep.negatives.clear();
    let opts = ForwardOptions { lambda: 0.5, ..Default::default() };
    assert!(model.forward_loss(&prep, &opts).is_err());
    assert!(model.forward_loss(&prep, &ForwardOptions { lambda: 0.0, ..Default::default() }).is_ok());
}

/// The taped training path and the value-level ops must agree exactly.
#[test]
fn graph_and_value_routes_agree() {
    let model = Model::new(micro_config(16), 17).unwrap();
    let prep = tiny_prep();
    let opts = ForwardOptions { lambda: 0.5, tau: 1.0, ..Default::default() };
    let graph = model.forward_loss(&prep, &opts).unwrap();

    let enc = model.encode_selective(&prep.seq).unwrap();
    let retr = model.encode_retrieved(&enc, &prep.retrieved).unwrap();
    let input = &prep.target[..prep.target.len() - 1];
    let dec = model.decode(input, &enc, Some(&retr)).unwrap();
    let l_gen = generation_loss(&dec.logits, &prep.target[1..]);

    let neg_hiddens: Vec<Array2<f64>> = prep
        .negatives
        .iter()
        .map(|n| model.decode(&n[..n.len() - 1], &enc, Some(&retr)).unwrap().hidden)
        .collect();
    let (l_cl, y_pos, y_negs) = model.contrastive_loss(&dec.hidden, &neg_hiddens, 1.0).unwrap();
    assert!(y_pos > 0.0 && y_pos < 1.0);
    assert!(y_negs.iter().all(|y| *y > 0.0 && *y < 1.0));

    assert!((graph.breakdown.gen - l_gen).abs() < 1e-12);
    assert!((graph.breakdown.contrastive - l_cl).abs() < 1e-12);
    assert!((graph.breakdown.total - (l_gen + 0.5 * l_cl)).abs() < 1e-12);
}

fn fd_check(model: &mut Model, prep: &PreparedExample, opts: &ForwardOptions) {
    let grads = model.forward_loss(prep, opts).unwrap().backward();
    let eps = 1e-4;
    for i in 0..model.params.len() {
        let (rows, cols) = model.params.tensor(i).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.params.tensor(i)[[r, c]];
                model.params.tensor_mut(i)[[r, c]] = orig + eps;
                let plus = model.loss_only(prep, opts).unwrap().total;
                model.params.tensor_mut(i)[[r, c]] = orig - eps;
                let minus = model.loss_only(prep, opts).unwrap().total;
                model.params.tensor_mut(i)[[r, c]] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let got = grads.tensors[i][[r, c]];
                let diff = (fd - got).abs();
                if diff > 1e-7 {
                    let rel = diff / fd.abs().max(got.abs());
                    assert!(
                        rel < 1e-4,
                        "{} [{r},{c}]: fd={fd:e} analytic={got:e} rel={rel:e}",
                        model.params.name(i)
                    );
                }
            }
        }
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut model = Model::new(micro_config(16), 23).unwrap();
    let prep = tiny_prep();
    let opts = ForwardOptions { lambda: 0.5, tau: 1.0, ..Default::default() };
    fd_check(&mut model, &prep, &opts);
}

#[test]
fn unused_paths_have_zero_gradients() {
    let model = Model::new(micro_config(16), 29).unwrap();
    let mut prep = tiny_prep();
    prep.retrieved.clear();
    let opts = ForwardOptions { lambda: 0.5, ..Default::default() };
    let grads = model.forward_loss(&prep, &opts).unwrap().backward();
    for name in
        ["pool.beta.wq", "gate.beta.w", "dec.0.retr.wq", "dec.0.gate.gamma.w", "dec.0.fuse_ln.gain"]
    {
        assert!(
            grads.get(&model.params, name).iter().all(|&g| g == 0.0),
            "{name} should be untouched"
        );
    }

    let prep = tiny_prep();
    let grads = model.forward_loss(&prep, &ForwardOptions { lambda: 0.0, ..Default::default() })
        .unwrap()
        .backward();
    assert!(grads.get(&model.params, "head.w_y").iter().all(|&g| g == 0.0));
    assert!(grads.get(&model.params, "head.b_y").iter().all(|&g| g == 0.0));
    // with lambda on, the head does receive gradient
    let grads = model.forward_loss(&prep, &ForwardOptions { lambda: 0.5, ..Default::default() })
        .unwrap()
        .backward();
    assert!(grads.get(&model.params, "head.w_y").iter().any(|&g| g != 0.0));
}

/// With positions zeroed the encoder is permutation-equivariant over
/// segments, so swapping two history pairs swaps their alphas.
#[test]
fn alpha_follows_segment_content() {
    let mut model = Model::new(micro_config(16), 31).unwrap();
    model.pos.fill(0.0);
    let seq_a = SegmentedSequence {
        token_ids: vec![CLS, TITLE, 11, STEP, 12, 13, CAPTION, 14, STEP, 15, CAPTION, 13, 12],
        segments: vec![
            seg(SegmentLabel::Cls, 0, 1),
            seg(SegmentLabel::GoalSubgoal, 1, 3),
            seg(SegmentLabel::Step, 3, 6),
            seg(SegmentLabel::Caption, 6, 8),
            seg(SegmentLabel::Step, 8, 10),
            seg(SegmentLabel::Caption, 10, 13),
        ],
    };
    // swap the two (step, caption) pairs
    let seq_b = SegmentedSequence {
        token_ids: vec![CLS, TITLE, 11, STEP, 15, CAPTION, 13, 12, STEP, 12, 13, CAPTION, 14],
        segments: vec![
            seg(SegmentLabel::Cls, 0, 1),
            seg(SegmentLabel::GoalSubgoal, 1, 3),
            seg(SegmentLabel::Step, 3, 5),
            seg(SegmentLabel::Caption, 5, 8),
            seg(SegmentLabel::Step, 8, 11),
            seg(SegmentLabel::Caption, 11, 13),
        ],
    };
    let a = model.encode_selective(&seq_a).unwrap();
    let b = model.encode_selective(&seq_b).unwrap();
    assert!((a.alphas[0] - b.alphas[0]).abs() < 1e-9); // goal unchanged
    assert!((a.alphas[1] - b.alphas[3]).abs() < 1e-9);
    assert!((a.alphas[2] - b.alphas[4]).abs() < 1e-9);
    assert!((a.alphas[3] - b.alphas[1]).abs() < 1e-9);
    assert!((a.alphas[4] - b.alphas[2]).abs() < 1e-9);
}

#[test]
fn empty_segment_is_rejected() {
    let model = Model::new(micro_config(16), 3).unwrap();
    let seq = SegmentedSequence {
        token_ids: vec![CLS, TITLE, 11],
        segments: vec![
            seg(SegmentLabel::Cls, 0, 1),
            seg(SegmentLabel::GoalSubgoal, 1, 3),
            seg(SegmentLabel::Step, 3, 3),
        ],
    };
    assert!(model.encode_selective(&seq).is_err());
}

#[test]
fn dropout_is_seeded_and_only_active_when_requested() {
    let mut config = micro_config(16);
    config.dropout_rate = 0.3;
    let model = Model::new(config, 37).unwrap();
    let prep = tiny_prep();
    let opts = |seed: Option<u64>| ForwardOptions { lambda: 0.0, dropout_seed: seed, ..Default::default() };
    let a = model.loss_only(&prep, &opts(Some(1))).unwrap().total;
    let b = model.loss_only(&prep, &opts(Some(1))).unwrap().total;
    let c = model.loss_only(&prep, &opts(Some(2))).unwrap().total;
    let eval1 = model.loss_only(&prep, &opts(None)).unwrap().total;
    let eval2 = model.loss_only(&prep, &opts(None)).unwrap().total;
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(eval1, eval2);
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let model = Model::new(micro_config(16), 41).unwrap();
    let ckpt = Checkpoint { model, pipeline: PipelineConfig::default() };
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf).unwrap();
    let mut buf2 = Vec::new();
    write_checkpoint(&ckpt, &mut buf2).unwrap();
    assert_eq!(buf, buf2, "writes must be byte-identical");

    let loaded = read_checkpoint(&mut &buf[..]).unwrap();
    assert_eq!(loaded.model.config, ckpt.model.config);
    assert_eq!(loaded.pipeline, ckpt.pipeline);
    assert_eq!(loaded.model.params, ckpt.model.params);

    let mut truncated = buf.clone();
    truncated.truncate(buf.len() - 9);
    assert!(read_checkpoint(&mut &truncated[..]).is_err());
    assert!(read_checkpoint(&mut &b"garbage"[..]).is_err());
}
