mod common;

use beamtrack::gradcheck::{full_model_gradcheck, GradCheckConfig};
use beamtrack::model::{
    assemble_batch, count_params, cnn_embed, encode_sequence, gru_step, logits_blocks, mha_residual, pad_frame,
    predict_logits, read_btmd, write_btmd, CnnVars, EmbedPool, GruVars, HeadVars, MhaVars, ModelConfig, ModelParams,
};
use beamtrack::preprocess::{preprocess_sequence, PreprocessedStream, DEFAULT_THRESHOLD};
use beamtrack::tensor::{BatchNormMode, BatchNormState, Tape, Tensor, Var};
use common::{check_grads, primed, rng, small_config, small_dataset, uniform, weighted_sum};
use proptest::prelude::*;

const E: usize = 3;
const H: usize = 4;

fn gru_leaves(tape: &mut Tape<f64>, t: &[Tensor<f64>]) -> GruVars {
    let v: Vec<Var> = t.iter().map(|x| tape.leaf(x.clone())).collect();
    gru_from(&v)
}

fn gru_from(v: &[Var]) -> GruVars {
    GruVars {
        w_r: v[0],
        u_r: v[1],
        b_r: v[2],
        w_z: v[3],
        u_z: v[4],
        b_z: v[5],
        w_h: v[6],
        u_h: v[7],
        b_h: v[8],
    }
}

fn random_gru(seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for _ in 0..3 {
        out.push(uniform(&mut r, &[E, H]));
        out.push(uniform(&mut r, &[H, H]));
        out.push(uniform(&mut r, &[H]));
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop GRU step on a single row.
fn naive_gru(p: &[Tensor<f64>], x: &[f64], h: &[f64]) -> Vec<f64> {
    let lin = |w: &Tensor<f64>, u: &Tensor<f64>, b: &Tensor<f64>, hh: &[f64], j: usize| {
        let mut s = b.data()[j];
        for i in 0..E {
            s += x[i] * w.data()[i * H + j];
        }
        for i in 0..H {
            s += hh[i] * u.data()[i * H + j];
        }
        s
    };
    let r: Vec<f64> = (0..H).map(|j| sigmoid(lin(&p[0], &p[1], &p[2], h, j))).collect();
    let z: Vec<f64> = (0..H).map(|j| sigmoid(lin(&p[3], &p[4], &p[5], h, j))).collect();
    let rh: Vec<f64> = (0..H).map(|j| r[j] * h[j]).collect();
    (0..H)
        .map(|j| {
            let cand = lin(&p[6], &p[7], &p[8], &rh, j).tanh();
            (1.0 - z[j]) * h[j] + z[j] * cand
        })
        .collect()
}

#[test]
fn gru_with_zero_parameters_halves_the_state() {
    let zeros: Vec<Tensor<f64>> = random_gru(0).iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut tape = Tape::new();
    let g = gru_leaves(&mut tape, &zeros);
    let x = tape.leaf(Tensor::new(vec![1, E], vec![0.3, -2.0, 1.0]).unwrap());
    let h0 = tape.leaf(Tensor::zeros(&[1, H]));
    let h1 = gru_step(&mut tape, &g, x, h0).unwrap();
    assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));

    // u = 1/2 and the candidate is tanh(0) = 0
    let h = tape.leaf(Tensor::new(vec![1, H], vec![1.0, -0.5, 0.25, 2.0]).unwrap());
    let out = gru_step(&mut tape, &g, x, h).unwrap();
    assert_eq!(tape.value(out).data(), &[0.5, -0.25, 0.125, 1.0]);
}

#[test]
fn closed_update_gate_carries_the_state() {
    let mut p = random_gru(3);
    p[5] = Tensor::full(&[H], -30.0);
    let mut tape = Tape::new();
    let g = gru_leaves(&mut tape, &p);
    let h_data = vec![0.7, -0.2, 0.05, 0.9];
    let x = tape.leaf(Tensor::new(vec![1, E], vec![0.4, 0.1, -0.6]).unwrap());
    let h = tape.leaf(Tensor::new(vec![1, H], h_data.clone()).unwrap());
    let out = gru_step(&mut tape, &g, x, h).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(&h_data) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn gru_step_matches_plain_loops() {
    let p = random_gru(11);
    let mut r = rng(12);
    let x = uniform(&mut r, &[2, E]);
    let h = uniform(&mut r, &[2, H]);
    let mut tape = Tape::new();
    let g = gru_leaves(&mut tape, &p);
    let (xv, hv) = (tape.leaf(x.clone()), tape.leaf(h.clone()));
    let out = gru_step(&mut tape, &g, xv, hv).unwrap();
    for row in 0..2 {
        let want = naive_gru(&p, &x.data()[row * E..(row + 1) * E], &h.data()[row * H..(row + 1) * H]);
        let got = &tape.value(out).data()[row * H..(row + 1) * H];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_sequence_gradients_over_three_steps() {
    let mut inputs = random_gru(21);
    let mut r = rng(22);
    inputs.push(uniform(&mut r, &[2 * 3, E]));
    let worst = check_grads(
        &inputs,
        |tape, v| {
            let g = gru_from(v);
            let (all, last) = encode_sequence(tape, &g, v[9], 3).unwrap();
            let a = weighted_sum(tape, all, 1);
            let b = weighted_sum(tape, last, 2);
            tape.add(a, b).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn encode_sequence_unrolls_the_step() {
    let p = random_gru(31);
    let mut r = rng(32);
    let seq = 3;
    let feats = uniform(&mut r, &[2 * seq, E]);
    let mut tape = Tape::new();
    let g = gru_leaves(&mut tape, &p);
    let f = tape.leaf(feats.clone());
    let (all, last) = encode_sequence(&mut tape, &g, f, seq).unwrap();
    assert_eq!(tape.shape(all), &[2 * seq, H]);
    assert_eq!(tape.shape(last), &[2, H]);
    for b in 0..2 {
        let mut h = vec![0.0; H];
        for s in 0..seq {
            let row = b * seq + s;
            h = naive_gru(&p, &feats.data()[row * E..(row + 1) * E], &h);
            let got = &tape.value(all).data()[row * H..(row + 1) * H];
            assert!(got.iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let got = &tape.value(last).data()[b * H..(b + 1) * H];
        assert!(got.iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn single_step_sequence_context_is_its_only_state() {
    let p = random_gru(41);
    let mut tape = Tape::new();
    let g = gru_leaves(&mut tape, &p);
    let f = tape.leaf(uniform(&mut rng(42), &[3, E]));
    let (all, last) = encode_sequence(&mut tape, &g, f, 1).unwrap();
    assert_eq!(tape.value(all).data(), tape.value(last).data());
}

#[test]
fn context_depends_on_frame_order() {
    let p = random_gru(51);
    let feats = uniform(&mut rng(52), &[3, E]);
    let mut reversed = Vec::new();
    for row in (0..3).rev() {
        reversed.extend_from_slice(&feats.data()[row * E..(row + 1) * E]);
    }
    let context = |f: Tensor<f64>| {
        let mut tape = Tape::new();
        let g = gru_leaves(&mut tape, &p);
        let v = tape.leaf(f);
        let (_, last) = encode_sequence(&mut tape, &g, v, 3).unwrap();
        tape.value(last).data().to_vec()
    };
    let a = context(feats.clone());
    let b = context(Tensor::new(vec![3, E], reversed).unwrap());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

fn mha_leaves(tape: &mut Tape<f64>, t: &[Tensor<f64>]) -> MhaVars {
    let v: Vec<Var> = t.iter().map(|x| tape.leaf(x.clone())).collect();
    MhaVars {
        w_q: v[0],
        b_q: v[1],
        w_k: v[2],
        b_k: v[3],
        w_v: v[4],
        b_v: v[5],
        w_o: v[6],
        b_o: v[7],
    }
}

fn random_mha(seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..4).flat_map(|_| [uniform(&mut r, &[H, H]), uniform(&mut r, &[H])]).collect()
}

fn affine_rows(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    x.chunks(n)
        .flat_map(|row| (0..m).map(move |j| b.data()[j] + (0..n).map(|i| row[i] * w.data()[i * m + j]).sum::<f64>()))
        .collect()
}

#[test]
fn attention_over_one_step_passes_values_through() {
    let p = random_mha(61);
    let x = uniform(&mut rng(62), &[2, H]);
    let mut tape = Tape::new();
    let m = mha_leaves(&mut tape, &p);
    let xv = tape.leaf(x.clone());
    let out = mha_residual(&mut tape, &m, xv, 1, 2).unwrap();
    let v = affine_rows(x.data(), &p[4], &p[5]);
    let o = affine_rows(&v, &p[6], &p[7]);
    for (i, got) in tape.value(out).data().iter().enumerate() {
        assert!((got - (x.data()[i] + o[i])).abs() < 1e-12);
    }
}

#[test]
fn identical_steps_attend_uniformly() {
    let p = random_mha(71);
    let row = [0.3, -0.1, 0.8, 0.2];
    let x = Tensor::new(vec![3, H], row.repeat(3)).unwrap();
    let mut tape = Tape::new();
    let m = mha_leaves(&mut tape, &p);
    let xv = tape.leaf(x);
    let q = tape.matmul(xv, m.w_q).unwrap();
    let k = tape.matmul(xv, m.w_k).unwrap();
    let att = tape.attention(q, k, xv, 3, 2).unwrap();
    let probs = tape.attention_probs(att).unwrap();
    assert_eq!(probs.len(), 2 * 3 * 3);
    assert!(probs.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn zero_output_projection_is_a_pure_residual() {
    let mut p = random_mha(81);
    p[6] = Tensor::zeros(&[H, H]);
    p[7] = Tensor::zeros(&[H]);
    let x = uniform(&mut rng(82), &[6, H]);
    let mut tape = Tape::new();
    let m = mha_leaves(&mut tape, &p);
    let xv = tape.leaf(x.clone());
    let out = mha_residual(&mut tape, &m, xv, 3, 2).unwrap();
    assert_eq!(tape.value(out).data(), x.data());
}

fn head_leaves(tape: &mut Tape<f64>, fuse: usize, hidden: usize, out: usize, seed: u64) -> (HeadVars, Vec<Tensor<f64>>) {
    let mut r = rng(seed);
    let t = vec![
        uniform(&mut r, &[fuse, hidden]),
        uniform(&mut r, &[hidden]),
        uniform(&mut r, &[hidden, out]),
        uniform(&mut r, &[out]),
    ];
    let v: Vec<Var> = t.iter().map(|x| tape.leaf(x.clone())).collect();
    (
        HeadVars {
            w_fuse: v[0],
            b_fuse: v[1],
            w_heads: v[2],
            b_heads: v[3],
        },
        t,
    )
}

#[test]
fn prediction_shapes_and_probabilities() {
    let (seq, slots, classes, batch, e) = (3, 2, 5, 4, 2);
    let mut tape = Tape::new();
    let (head, _) = head_leaves(&mut tape, 2 * H + e, 6, slots * classes, 91);
    let mut r = rng(92);
    let attended = tape.leaf(uniform(&mut r, &[batch * seq, H]));
    let context = tape.leaf(uniform(&mut r, &[batch, H]));
    let current = tape.leaf(uniform(&mut r, &[batch, e]));
    let logits = predict_logits(&mut tape, &head, attended, context, current, seq, slots).unwrap();
    assert_eq!(tape.shape(logits), &[batch * slots, classes]);
    let blocks = logits_blocks(tape.value(logits), slots).unwrap();
    assert_eq!(blocks.len(), batch);
    for b in &blocks {
        for s in 0..slots {
            let total: f64 = b.probs_row(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_features_give_head_biases_after_relu() {
    let (seq, slots, classes, e) = (2, 3, 4, 2);
    let mut tape = Tape::new();
    let (head, t) = head_leaves(&mut tape, 2 * H + e, 5, slots * classes, 101);
    let attended = tape.leaf(Tensor::zeros(&[seq, H]));
    let context = tape.leaf(Tensor::zeros(&[1, H]));
    let current = tape.leaf(Tensor::zeros(&[1, e]));
    let logits = predict_logits(&mut tape, &head, attended, context, current, seq, slots).unwrap();
    let hidden: Vec<f64> = t[1].data().iter().map(|v| v.max(0.0)).collect();
    let want = affine_rows(&hidden, &t[2], &t[3]);
    for (a, b) in tape.value(logits).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn bind_cnn(tape: &mut Tape<f64>, p: &ModelParams<f64>) -> CnnVars {
    p.bind(tape, false).cnn
}

#[test]
fn blank_frames_embed_to_the_bias() {
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(), 3).unwrap();
    let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
    *p.get_mut("embed.bias").unwrap() = Tensor::new(vec![6], bias.clone()).unwrap();
    let mut tape = Tape::new();
    let cnn = bind_cnn(&mut tape, &p);
    let x = tape.leaf(Tensor::zeros(&[3, 3, 32, 32]));
    let (emb, stats) = cnn_embed(&mut tape, &cnn, p.bn_states(), x, BatchNormMode::Train, EmbedPool::Flatten).unwrap();
    assert_eq!(stats.len(), 5);
    assert_eq!(tape.shape(emb), &[3, 6]);
    for row in tape.value(emb).data().chunks(6) {
        assert!(row.iter().zip(&bias).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn desk_cnn_reduces_64_pixels_to_2() {
    let cfg = ModelConfig::desk();
    assert_eq!(cfg.padded_dims(), (64, 64));
    assert_eq!(cfg.cnn_output_len(), 64 * 2 * 2);
    let avg = ModelConfig {
        embed_pool: EmbedPool::Average,
        ..cfg.clone()
    };
    assert_eq!(avg.cnn_output_len(), 64);
    let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let cnn = p.bind(&mut tape, false).cnn;
    let x = tape.leaf(uniform(&mut rng(1), &[2, 3, 64, 64]).cast::<f32>());
    let (emb, _) = cnn_embed(&mut tape, &cnn, p.bn_states(), x, BatchNormMode::Train, EmbedPool::Flatten).unwrap();
    assert_eq!(tape.shape(emb), &[2, 64]);
}

#[test]
fn first_kernel_gradient_matches_differences() {
    let p = ModelParams::<f64>::init(&ModelConfig::tiny(), 8).unwrap();
    let k0 = p.get("cnn.0.kernel").unwrap().clone();
    let mut r = rng(9);
    let frames = uniform(&mut r, &[2, 3, 32, 32]);
    let worst = check_grads(
        &[k0],
        |tape, v| {
            let mut cnn = p.bind(tape, false).cnn;
            cnn.kernels[0] = v[0];
            let x = tape.leaf(frames.clone());
            let (emb, _) = cnn_embed(tape, &cnn, p.bn_states(), x, BatchNormMode::Train, EmbedPool::Flatten).unwrap();
            weighted_sum(tape, emb, 4)
        },
        1e-5,
    );
    assert!(worst < 1e-4, "worst relative error {worst}");
}

/// Layer-by-layer sum written out independently of the parameter layout.
fn hand_count(c: &ModelConfig) -> usize {
    let mut total = 0;
    let mut cin = 3;
    for &w in &c.cnn_channels {
        total += w * cin * 9 + 2 * w;
        cin = w;
    }
    let (ph, pw) = c.padded_dims();
    let flat = match c.embed_pool {
        EmbedPool::Flatten => cin * (ph / 32) * (pw / 32),
        EmbedPool::Average => cin,
    };
    let (e, h) = (c.embed_dim, c.gru_hidden);
    total += flat * e + e;
    total += 3 * (e * h + h * h + h);
    if c.mha {
        total += 4 * (h * h + h);
    }
    let fuse = 2 * h + e;
    let out = (c.horizon + 1) * c.codebook_size;
    total + fuse * c.pred_hidden + c.pred_hidden + c.pred_hidden * out + out
}

#[test]
fn parameter_counts() {
    for cfg in [ModelConfig::desk(), ModelConfig::tiny(), ModelConfig::paper_scale()] {
        assert_eq!(count_params(&cfg), hand_count(&cfg));
    }
    assert_eq!(count_params(&ModelConfig::desk()), 186_472);
    assert!(count_params(&ModelConfig::desk()) <= 200_000);
    let paper = count_params(&ModelConfig::paper_scale()) as f64;
    assert!((1.44e6..=2.16e6).contains(&paper), "{paper}");
    for cfg in [ModelConfig::desk(), ModelConfig::paper_scale()] {
        let off = ModelConfig { mha: false, ..cfg.clone() };
        assert!(count_params(&cfg) > count_params(&off));
        assert_eq!(count_params(&cfg) - count_params(&off), 4 * (cfg.gru_hidden + 1) * cfg.gru_hidden);
    }
}

#[test]
fn full_model_gradients_pass_the_check() {
    let cfg = GradCheckConfig::default();
    let report = full_model_gradcheck(&ModelConfig::tiny(), &cfg, None).unwrap();
    assert!(report.entries.len() >= 50);
    for prefix in ["cnn.0.kernel", "cnn.2.gamma", "cnn.4.beta", "gru.w_z", "gru.u_h", "mha.w_q", "mha.w_o", "pred.w_heads"] {
        assert!(report.entries.iter().any(|e| e.name == prefix), "{prefix} not sampled");
    }
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn corrupted_gradient_is_reported_by_name() {
    let report = full_model_gradcheck(&ModelConfig::tiny(), &GradCheckConfig::default(), Some("gru.u_z")).unwrap();
    assert!(!report.passed());
    assert!(report.failures().all(|e| e.name == "gru.u_z"));
    assert!(report.failures().count() > 0);
}

#[test]
fn mha_free_model_passes_the_check() {
    let cfg = ModelConfig {
        mha: false,
        ..ModelConfig::tiny()
    };
    let report = full_model_gradcheck(&cfg, &GradCheckConfig { seed: 3, ..Default::default() }, None).unwrap();
    assert!(report.entries.iter().all(|e| !e.name.starts_with("mha.")));
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn batches_match_sequence_preprocessing_and_padding() {
    let ds = small_dataset(30, 5);
    let cfg = small_config();
    let stream = PreprocessedStream::<f64>::new(&ds, DEFAULT_THRESHOLD).unwrap();
    let ts = [2, 9, 17];
    let batch = assemble_batch(&stream, &ts, &cfg).unwrap();
    let (ph, pw) = cfg.padded_dims();
    assert_eq!(batch.shape(), &[ts.len() * 3, 3, ph, pw]);
    let padded = 3 * ph * pw;
    for (b, &t) in ts.iter().enumerate() {
        let sample = ds.sample::<f64>(t).unwrap();
        let masked = preprocess_sequence(&sample.frames, DEFAULT_THRESHOLD).unwrap();
        for (s, frame) in masked.iter().enumerate() {
            let mut want = vec![0.0; padded];
            if s > 0 {
                pad_frame(frame.data(), 3, 16, 16, ph, pw, &mut want);
            }
            let row = b * 3 + s;
            assert_eq!(&batch.data()[row * padded..(row + 1) * padded], want.as_slice(), "sample {t} slot {s}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_checkpoints_round_trip() {
    let ds = small_dataset(30, 6);
    let cfg = small_config();
    let stream = PreprocessedStream::<f32>::new(&ds, DEFAULT_THRESHOLD).unwrap();
    let frames = assemble_batch(&stream, &[3, 4, 10], &cfg).unwrap();
    let p = primed(ModelParams::<f32>::init(&cfg, 4).unwrap(), frames.clone());
    let a = p.predict(frames.clone()).unwrap();
    assert_eq!(a, p.predict(frames.clone()).unwrap());

    let mut bytes = Vec::new();
    write_btmd(&mut bytes, &p).unwrap();
    let q: ModelParams<f32> = read_btmd(&mut bytes.as_slice()).unwrap();
    assert_eq!(q, p);
    assert_eq!(q.predict(frames).unwrap(), a);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let ds = small_dataset(30, 6);
    let cfg = ModelConfig {
        codebook_size: 8,
        ..small_config()
    };
    let stream = PreprocessedStream::<f32>::new(&ds, DEFAULT_THRESHOLD).unwrap();
    assert!(matches!(assemble_batch(&stream, &[3], &cfg), Err(beamtrack::Error::Mismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn eval_forward_is_per_sample(seed in 0u64..1000) {
        // eval-mode batch norm uses running statistics, so each sample's
        // prediction must not depend on its batch mates
        let cfg = ModelConfig::tiny();
        let mut r = rng(seed + 1);
        let both = uniform(&mut r, &[2 * 3, 3, 32, 32]);
        let p = primed(ModelParams::<f64>::init(&cfg, seed).unwrap(), uniform(&mut r, &[2 * 3, 3, 32, 32]));
        let half = 3 * 3 * 32 * 32;
        let first = Tensor::new(vec![3, 3, 32, 32], both.data()[..half].to_vec()).unwrap();
        let joint = p.predict(both).unwrap();
        let alone = p.predict(first).unwrap();
        for (a, b) in joint[0].probs_row(0).iter().zip(alone[0].probs_row(0)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_state_count_matches_layers(c0 in 1usize..5, c4 in 1usize..5) {
        let cfg = ModelConfig { cnn_channels: [c0, 2, 2, 2, c4], ..ModelConfig::tiny() };
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        prop_assert_eq!(p.bn_states().len(), 5);
        prop_assert_eq!(p.bn_states()[0].channels(), c0);
        prop_assert!(p.bn_states().iter().all(|s: &BatchNormState<f32>| !s.is_initialized()));
        prop_assert_eq!(p.count_params(), hand_count(&cfg));
    }
}
