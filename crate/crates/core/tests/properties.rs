use proptest::prelude::*;

use coop_edl::cli::{parse_metrics, sig6, write_metrics};
use coop_edl::linalg::{matmul, svd, transpose, Matrix};
use coop_edl::network::{build_feedback_matrix, init_network, mlp_specs, read_checkpoint, write_checkpoint, ActivationKind};
use coop_edl::trainer::{MetricsRecord, Variant};

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(a in matrix(7)) {
        let s = svd(&a).unwrap();
        let scale = a.max_abs().max(1.0);
        prop_assert!(close(&s.reconstruct().unwrap(), &a, 1e-9 * scale));
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|v| *v >= 0.0));
        let k = s.sigma.len();
        let utu = matmul(&transpose(&s.u), &s.u).unwrap();
        let vvt = matmul(&s.vt, &transpose(&s.vt)).unwrap();
        prop_assert!(close(&utu, &Matrix::identity(k), 1e-9));
        prop_assert!(close(&vvt, &Matrix::identity(k), 1e-9));
    }

    #[test]
    fn feedback_matrix_shift_is_linear(a in matrix(5), s in 0.0..2.0f64) {
        let (b0, _) = build_feedback_matrix(&a, 0.0).unwrap();
        prop_assert_eq!(&b0, &a);
        let (b1, svd) = build_feedback_matrix(&a, s).unwrap();
        // B − T = s·U Vᵀ.
        let uvt = matmul(&svd.u, &svd.vt).unwrap();
        let expect: Vec<f64> = a.data().iter().zip(uvt.data()).map(|(t, u)| t + s * u).collect();
        let expect = Matrix::new(a.rows(), a.cols(), expect).unwrap();
        prop_assert!(close(&b1, &expect, 1e-9 * a.max_abs().max(1.0)));
    }

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), input in 1usize..6, hidden in prop::collection::vec(1usize..6, 0..3), bias in any::<bool>()) {
        let net = init_network(&mlp_specs(input, &hidden, 3, ActivationKind::Relu), seed, bias).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&net, &mut bytes).unwrap();
        prop_assert_eq!(read_checkpoint(&bytes[..]).unwrap(), net);
    }

    #[test]
    fn metrics_csv_roundtrip(rows in prop::collection::vec((-1e4..1e4f64, 0.0..1.0f64, 0usize..10_000), 1..20)) {
        let records: Vec<MetricsRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (ret, eps, fill))| MetricsRecord {
                episode: i + 1,
                variant: Variant::Edql,
                seed: 17,
                episode_return: *ret,
                mean100: ret / 3.0,
                std100: ret.abs().sqrt(),
                q1_mean: ret * 1e-3,
                q2_mean: -ret * 1e-7,
                qdiff: 0.0,
                eps: *eps,
                s_scale: eps * 0.05,
                buffer_fill: *fill,
                ms: 1.25,
            })
            .collect();
        let mut buf = Vec::new();
        write_metrics(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed = parse_metrics(&text).unwrap();
        prop_assert_eq!(parsed.len(), records.len());
        for (p, r) in parsed.iter().zip(&records) {
            prop_assert_eq!(p.episode, r.episode);
            prop_assert_eq!(p.variant, r.variant);
            prop_assert_eq!(p.buffer_fill, r.buffer_fill);
            for (x, y) in [(p.episode_return, r.episode_return), (p.mean100, r.mean100), (p.q2_mean, r.q2_mean), (p.eps, r.eps)] {
                prop_assert!((x - y).abs() <= 5e-6 * y.abs(), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn sig6_has_at_most_six_significant_digits(x in prop::num::f64::NORMAL) {
        let s = sig6(x);
        let mantissa = s.split('e').next().unwrap();
        let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
        prop_assert!(digits.trim_start_matches('0').len() <= 6, "{}", s);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs());
    }
}
