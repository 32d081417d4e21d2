//! The synthetic data must be learnable from hand-measured features: a
//! small recurrent model on oracle features (RMS, F0, brightness, mouth
//! curvature) has to reach high held-out concordance. When this holds,
//! an end-to-end training failure indicates a model bug, not impossible
//! data.

use affect::analysis::oracle_features;
use affect::lstm::{head_forward, stack_forward, LstmStack, OutputHead};
use affect::metrics;
use affect::rng::Rng;
use affect::synth::{DataSource, DatasetSpec, MemoryDataset};
use affect::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

struct FeatureSet {
    features: Vec<Vec<Vec<f64>>>, // per recording: [T][4]
    arousal: Vec<Vec<f64>>,
    valence: Vec<Vec<f64>>,
}

fn featurize(data: &MemoryDataset, ids: &[String]) -> FeatureSet {
    let mut out = FeatureSet {
        features: Vec::new(),
        arousal: Vec::new(),
        valence: Vec::new(),
    };
    for id in ids {
        let rec = data.load(id).unwrap();
        out.features.push(oracle_features(&rec).unwrap());
        out.arousal.push(rec.arousal.clone());
        out.valence.push(rec.valence.clone());
    }
    out
}

fn features_tensor(features: &[Vec<f64>], start: usize, len: usize) -> Tensor {
    let dim = features[0].len();
    let mut data = Vec::with_capacity(len * dim);
    for row in &features[start..start + len] {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![len, dim], data).unwrap()
}

#[test]
fn oracle_features_reach_high_held_out_concordance() {
    let data = MemoryDataset::generate(&DatasetSpec {
        seed: 31,
        train: 6,
        validation: 2,
        test: 0,
        duration_s: 12,
    })
    .unwrap();
    let split = data.split().clone();
    let mut train = featurize(&data, &split.train);
    let mut val = featurize(&data, &split.validation);

    // standardize features with training-set statistics
    let dim = train.features[0][0].len();
    let mut mean = vec![0.0; dim];
    let mut count = 0.0;
    for rec in &train.features {
        for row in rec {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1.0;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    let mut var = vec![0.0; dim];
    for rec in &train.features {
        for row in rec {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt().max(1e-9)).collect();
    for set in [&mut train, &mut val] {
        for rec in &mut set.features {
            for row in rec {
                for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - m) / s;
                }
            }
        }
    }

    let hidden = 16;
    let mut rng = Rng::new(99);
    let mut stack = LstmStack::init(4, hidden, &mut rng);
    let mut head = OutputHead::init(hidden, &mut rng);

    let chunk = 150;
    let mut items = Vec::new();
    for (r, feats) in train.features.iter().enumerate() {
        for c in 0..feats.len() / chunk {
            items.push((r, c * chunk));
        }
    }

    let mut adam: Vec<AdamState> = [
        stack.layer1.w_input.numel(),
        stack.layer1.w_recurrent.numel(),
        stack.layer1.bias.numel(),
        stack.layer2.w_input.numel(),
        stack.layer2.w_recurrent.numel(),
        stack.layer2.bias.numel(),
        head.weight.numel(),
        head.bias.numel(),
    ]
    .iter()
    .map(|&n| AdamState::new(n, AdamConfig::default()))
    .collect();

    let mut shuffle_rng = Rng::new(7);
    for _step in 0..800 {
        let (r, start) = items[shuffle_rng.index(items.len())];
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let leaf = |tape: &mut Tape, t: &Tensor, leaves: &mut Vec<affect::tensor::Var>| {
            let mut t = t.clone();
            t.requires_grad = true;
            let v = tape.leaf(&t);
            leaves.push(v);
            v
        };
        let v1 = affect::lstm::LstmVars {
            w_input: leaf(&mut tape, &stack.layer1.w_input, &mut leaves),
            w_recurrent: leaf(&mut tape, &stack.layer1.w_recurrent, &mut leaves),
            bias: leaf(&mut tape, &stack.layer1.bias, &mut leaves),
        };
        let v2 = affect::lstm::LstmVars {
            w_input: leaf(&mut tape, &stack.layer2.w_input, &mut leaves),
            w_recurrent: leaf(&mut tape, &stack.layer2.w_recurrent, &mut leaves),
            bias: leaf(&mut tape, &stack.layer2.bias, &mut leaves),
        };
        let hv = affect::lstm::HeadVars {
            weight: leaf(&mut tape, &head.weight, &mut leaves),
            bias: leaf(&mut tape, &head.bias, &mut leaves),
        };

        let seq = tape.leaf(&features_tensor(&train.features[r], start, chunk));
        let (hidden_seq, _, _) = stack_forward(&mut tape, seq, &v1, &v2, hidden, None).unwrap();
        let tracks = head_forward(&mut tape, hidden_seq, &hv).unwrap();
        let pa = tape.slice_cols(tracks, 0, 1).unwrap();
        let pv = tape.slice_cols(tracks, 1, 1).unwrap();
        let la = tape
            .ccc_loss(pa, &train.arousal[r][start..start + chunk])
            .unwrap();
        let lv = tape
            .ccc_loss(pv, &train.valence[r][start..start + chunk])
            .unwrap();
        let sum = tape.add(la, lv).unwrap();
        let loss = tape.scale(sum, 0.5);
        tape.backward(loss).unwrap();

        let mut slots: Vec<&mut Tensor> = vec![
            &mut stack.layer1.w_input,
            &mut stack.layer1.w_recurrent,
            &mut stack.layer1.bias,
            &mut stack.layer2.w_input,
            &mut stack.layer2.w_recurrent,
            &mut stack.layer2.bias,
            &mut head.weight,
            &mut head.bias,
        ];
        for (i, slot) in slots.iter_mut().enumerate() {
            if let Some(grad) = tape.grad(leaves[i]) {
                let mut values = slot.data().to_vec();
                adam_step(&mut values, grad, &mut adam[i], 5e-3).unwrap();
                slot.set_data(values).unwrap();
            }
        }
    }

    // held-out evaluation over whole recordings
    let mut pred_a = Vec::new();
    let mut pred_v = Vec::new();
    let mut gold_a = Vec::new();
    let mut gold_v = Vec::new();
    for (r, feats) in val.features.iter().enumerate() {
        let mut tape = Tape::new();
        let v1 = stack.layer1.vars(&mut tape);
        let v2 = stack.layer2.vars(&mut tape);
        let hv = head.vars(&mut tape);
        let seq = tape.leaf(&features_tensor(feats, 0, feats.len()));
        let (hidden_seq, _, _) = stack_forward(&mut tape, seq, &v1, &v2, hidden, None).unwrap();
        let tracks = head_forward(&mut tape, hidden_seq, &hv).unwrap();
        let data = tape.data(tracks);
        for t in 0..feats.len() {
            pred_a.push(data[2 * t]);
            pred_v.push(data[2 * t + 1]);
        }
        gold_a.extend_from_slice(&val.arousal[r][..feats.len()]);
        gold_v.extend_from_slice(&val.valence[r][..feats.len()]);
    }
    let rho_a = metrics::ccc(&pred_a, &gold_a).unwrap();
    let rho_v = metrics::ccc(&pred_v, &gold_v).unwrap();
    println!("oracle-feature model: held-out arousal {rho_a:.3}, valence {rho_v:.3}");
    assert!(rho_a >= 0.95, "arousal {rho_a}");
    assert!(rho_v >= 0.95, "valence {rho_v}");
}
