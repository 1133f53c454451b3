use cdm::linalg::Matrix;
use cdm::model::{
    cosine_similarity, forward_base, forward_gated, gate_probabilities, sigmoid, CdmModel,
    Hyperparams, SimilarityMatrix,
};
use cdm::store::{decode, encode, ConceptSet, Container, EmbeddingMatrix, LabeledDataset};
use cdm::variational::{
    kl_bernoulli, sample_relaxed_gate, GateSample, LogisticNoise, Relaxation,
};
use proptest::prelude::*;

fn hp() -> Hyperparams {
    Hyperparams { alpha: 1e-4, beta: 1e-4, tau: 0.1 }
}

/// Rows drawn as f32 and normalized, so the payload survives f32 storage.
fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), rows).prop_filter_map(
        "zero row",
        move |rs| {
            let mut out = Vec::with_capacity(rows);
            for r in rs {
                let n = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
                if n < 1e-3 {
                    return None;
                }
                out.push(r.iter().map(|&v| (f64::from(v) / n) as f32 as f64).collect());
            }
            Matrix::from_rows(&out).ok()
        },
    )
}

fn dataset() -> impl Strategy<Value = LabeledDataset> {
    (1usize..6, 1usize..5, 1usize..4).prop_flat_map(|(n, k, c)| {
        (
            unit_rows(n, k),
            prop::collection::vec(0..c, n),
            prop::collection::vec("[a-z]{1,6}", c),
        )
            .prop_map(|(m, labels, names)| {
                let emb = EmbeddingMatrix::with_prefix(m, "img").unwrap();
                LabeledDataset::new(emb, labels, names).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn dataset_round_trip_is_identity(d in dataset()) {
        let back = decode(&encode(&d).unwrap()).unwrap();
        prop_assert_eq!(back, Container::Dataset(d));
    }

    #[test]
    fn concepts_round_trip_is_identity(m in unit_rows(4, 3), names in prop::collection::vec("[ -~]{0,12}", 4)) {
        let c = ConceptSet::new(m, names).unwrap();
        let back = decode(&encode(&c).unwrap()).unwrap().into_concepts().unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn loader_is_total_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn loader_is_total_after_valid_magic(
        header_len in any::<u32>(),
        tail in prop::collection::vec(any::<u8>(), 0..256),
    ) {
        let mut bytes = b"CDME0001".to_vec();
        bytes.extend_from_slice(&header_len.to_le_bytes());
        bytes.extend_from_slice(&tail);
        let _ = decode(&bytes);
    }

    #[test]
    fn loader_is_total_on_mutated_containers(
        d in dataset(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
    ) {
        let mut bytes = encode(&d).unwrap();
        for (idx, b) in flips {
            let i = idx.index(bytes.len());
            bytes[i] = b;
        }
        let _ = decode(&bytes);
    }

    #[test]
    fn loaded_rows_are_unit_norm(rows in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 3), 1..6)) {
        let header = format!(r#"{{"kind":"matrix","rows":{},"dim":3}}"#, rows.len());
        let mut bytes = b"CDME0001".to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for r in &rows {
            for v in r {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Ok(c) = decode(&bytes) {
            let m = c.into_embeddings().unwrap();
            for row in m.matrix().iter_rows() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn similarities_are_cosines(a in unit_rows(4, 5), b in unit_rows(3, 5)) {
        let s = cosine_similarity(
            &EmbeddingMatrix::with_prefix(a, "i").unwrap(),
            &EmbeddingMatrix::with_prefix(b, "c").unwrap(),
        ).unwrap();
        prop_assert!(s.values().as_slice().iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn open_gates_reduce_to_base_model_bitwise(
        s in prop::collection::vec(-1.0f64..1.0, 12),
        w in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let s = SimilarityMatrix::new(Matrix::from_vec(3, 4, s).unwrap()).unwrap();
        let model = CdmModel::new(Matrix::from_vec(2, 4, w).unwrap(), Matrix::zeros(1, 4), hp(), true).unwrap();
        let base = forward_base(&s, &model).unwrap();
        let gated = forward_gated(&s, &GateSample::ones(3, 4), &model).unwrap();
        prop_assert_eq!(base, gated);
    }

    #[test]
    fn base_model_is_linear(
        s1 in prop::collection::vec(-0.5f64..0.5, 6),
        s2 in prop::collection::vec(-0.5f64..0.5, 6),
        w in prop::collection::vec(-5.0f64..5.0, 9),
    ) {
        let model = CdmModel::new(Matrix::from_vec(3, 3, w).unwrap(), Matrix::zeros(1, 3), hp(), false).unwrap();
        let m1 = Matrix::from_vec(2, 3, s1).unwrap();
        let m2 = Matrix::from_vec(2, 3, s2).unwrap();
        let sum = SimilarityMatrix::new(m1.add(&m2).unwrap()).unwrap();
        let y1 = forward_base(&SimilarityMatrix::new(m1).unwrap(), &model).unwrap();
        let y2 = forward_base(&SimilarityMatrix::new(m2).unwrap(), &model).unwrap();
        let y = forward_base(&sum, &model).unwrap();
        let expect = y1.values().add(y2.values()).unwrap();
        for (a, b) in y.values().as_slice().iter().zip(expect.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn gate_probability_is_monotone(x in unit_rows(1, 3), w in prop::collection::vec(-3.0f64..3.0, 6), delta in 1e-3f64..1.0) {
        let img = EmbeddingMatrix::with_prefix(x.clone(), "i").unwrap();
        let w_s = Matrix::from_vec(3, 2, w).unwrap();
        let model = CdmModel::new(Matrix::zeros(1, 2), w_s.clone(), hp(), true).unwrap();
        let p = gate_probabilities(&img, &model).unwrap();
        // moving column 0 along x raises its logit by delta * |x|^2 = delta
        let mut bumped = w_s;
        for k in 0..3 {
            let v = bumped.get(k, 0) + delta * x.get(0, k);
            bumped.set(k, 0, v);
        }
        let model2 = CdmModel::new(Matrix::zeros(1, 2), bumped, hp(), true).unwrap();
        let p2 = gate_probabilities(&img, &model2).unwrap();
        prop_assert!(p2.get(0, 0) > p.get(0, 0));
        prop_assert_eq!(p2.get(0, 1), p.get(0, 1));
        prop_assert!(p.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 1..10), alpha in 1e-6f64..(1.0 - 1e-6)) {
        let m = Matrix::from_vec(1, p.len(), p).unwrap();
        prop_assert!(kl_bernoulli(&m, alpha)[0] >= 0.0);
    }

    #[test]
    fn relaxed_sample_sharpens_as_temperature_drops(p in 0.01f64..0.99, t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
        prop_assume!((p - 0.5).abs() > 1e-6);
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let probs = Matrix::filled(1, 1, p);
        let zero = LogisticNoise::zeros(1, 1);
        let z_lo = sample_relaxed_gate(&probs, &zero, lo, Relaxation::Standard).unwrap().values().get(0, 0);
        let z_hi = sample_relaxed_gate(&probs, &zero, hi, Relaxation::Standard).unwrap().values().get(0, 0);
        prop_assert!((z_lo - 0.5).abs() >= (z_hi - 0.5).abs());
    }

    #[test]
    fn relaxed_threshold_equals_logit_sign(p in 0.001f64..0.999, l in -20.0f64..20.0, tau in 0.01f64..3.0) {
        let z = sample_relaxed_gate(
            &Matrix::filled(1, 1, p),
            &LogisticNoise::from_matrix(Matrix::filled(1, 1, l)).unwrap(),
            tau,
            Relaxation::Standard,
        ).unwrap().values().get(0, 0);
        let logit = p.ln() - (1.0 - p).ln();
        // skip the measure-zero boundary where rounding decides
        prop_assume!((logit + l).abs() > 1e-9);
        prop_assert_eq!(z > 0.5, logit + l > 0.0);
        let oracle = sigmoid((logit + l) / tau).clamp(1e-12, 1.0 - 1e-12);
        prop_assert!((z - oracle).abs() < 1e-12);
    }
}
