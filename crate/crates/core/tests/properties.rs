mod common;

use proptest::prelude::*;

use dvi::dit::{
    attend, attention_weights, id_cross_attention, AttentionIO, Conditioning, Dit, DitConfig,
};
use dvi::modulation::{broadcast, pffm, token_norm, NormalizedId};
use dvi::scheduler::build_grid;
use dvi::semantic::{
    fuse_project, mock_extract, FrozenProjection, IdEmbedding, RawIdFeatures, SemanticConfig,
};
use dvi::tensor::{
    decode, encode, synth_latent, DvtTensor, LatentTensor, SeededGenerator, SynthFamily,
    TokenMatrix,
};
use dvi::visual::{extract_stats, plan_crop};

use common::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<f32>().prop_filter("finite", |v| v.is_finite())
}

fn any_tensor() -> impl Strategy<Value = DvtTensor> {
    prop_oneof![
        (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            prop::collection::vec(finite_f32(), c * h * w)
                .prop_map(move |d| DvtTensor::Latent(LatentTensor::new(c, h, w, d).unwrap()))
        }),
        (1usize..6, 1usize..9).prop_flat_map(|(n, d)| {
            prop::collection::vec(finite_f32(), n * d)
                .prop_map(move |v| DvtTensor::Tokens(TokenMatrix::new(n, d, v).unwrap()))
        }),
    ]
}

proptest! {
    #[test]
    fn dvt_round_trip_is_byte_exact(t in any_tensor()) {
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn synth_latent_is_pure(seed in any::<u64>(), c in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let g = SeededGenerator::new(seed);
        let a = synth_latent(g, c, h, w, SynthFamily::Uniform).unwrap();
        let _other = synth_latent(SeededGenerator::new(seed ^ 1), c, h, w, SynthFamily::Gaussian).unwrap();
        let b = synth_latent(g, c, h, w, SynthFamily::Uniform).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn crop_plan_is_centered(h in 1usize..4000, w in 1usize..4000, s in 1usize..1024) {
        let p = plan_crop(h, w, s).unwrap();
        prop_assert_eq!(p.scaled_h.min(p.scaled_w), s);
        prop_assert!(p.scaled_h >= s && p.scaled_w >= s);
        prop_assert_eq!(p.crop_top, (p.scaled_h - s) / 2);
        prop_assert_eq!(p.crop_left, (p.scaled_w - s) / 2);
        prop_assert!(p.crop_top + s <= p.scaled_h && p.crop_left + s <= p.scaled_w);
    }

    #[test]
    fn stats_shift_scale_covariance(
        seed in any::<u64>(),
        a in prop::sample::select(vec![-2.0f32, -1.0, 0.5, 2.0, 3.0, 4.0]),
        b in -8i32..8,
    ) {
        // grid values k/64 keep a*z + b exact in f32
        let g = SeededGenerator::new(seed);
        let raw = g.uniform(3 * 5 * 4, -4.0, 4.0);
        let data: Vec<f32> = raw.iter().map(|v| (v * 64.0).round() / 64.0).collect();
        let z = LatentTensor::new(3, 5, 4, data).unwrap();
        let zt = z.map(|v| a * v + b as f32).unwrap();
        let eps = 1e-6;
        let s = extract_stats(&z, eps).unwrap();
        let st = extract_stats(&zt, eps).unwrap();
        let (a, b) = (a as f64, b as f64);
        for c in 0..3 {
            prop_assert!((st.mu[c] - (a * s.mu[c] + b)).abs() < 1e-9);
            let want = a * a * (s.sigma[c].powi(2) - eps) + eps;
            prop_assert!((st.sigma[c].powi(2) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_floor_holds(k in -1e6f32..1e6, eps in 1e-9f64..1e-2) {
        let z = synth_latent(SeededGenerator::new(0), 2, 3, 3, SynthFamily::Constant(k)).unwrap();
        let s = extract_stats(&z, eps).unwrap();
        for &sig in &s.sigma {
            prop_assert!(sig >= eps.sqrt() * (1.0 - 1e-15));
        }
    }

    #[test]
    fn broadcast_index_law(c2 in 1usize..=64, d in 1usize..=4096, seed in any::<u64>()) {
        let v: Vec<f64> = SeededGenerator::new(seed).gaussian(c2, 3.0).iter().map(|&x| x as f64).collect();
        let m = broadcast(&v, d).unwrap();
        prop_assert_eq!(m.len(), d);
        for i in 0..d {
            prop_assert_eq!(m.values()[i], v[i % c2]);
        }
    }

    #[test]
    fn norm_output_moments(seed in any::<u64>(), d in 2usize..512, scale in 0.5f32..50.0, shift in -100f32..100.0) {
        let row: Vec<f32> = SeededGenerator::new(seed).gaussian(d, scale).iter().map(|v| v + shift).collect();
        prop_assume!({
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64 > 0.1
        });
        let out = token_norm(&row, 1e-5).unwrap();
        let n = d as f64;
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-6, "mean {mean}");
        prop_assert!((1.0 - 1e-3..=1.0).contains(&var), "var {var}");
    }

    #[test]
    fn pffm_bias_grows_linearly(
        seed in any::<u64>(),
        l1 in 0.0f64..1.0,
        dl in 0.0f64..1.0,
        psi in 0.1f64..1.0,
        d in prop::sample::select(vec![64usize, 2048]),
    ) {
        let id = IdEmbedding(seeded_matrix(seed, 8, d, 1.0));
        let v: Vec<f64> = SeededGenerator::new(seed ^ 7).gaussian(32, 1.0).iter().map(|&x| x as f64).collect();
        let m = broadcast(&v, d).unwrap();
        let l2 = l1 + dl;
        let f1 = pffm(&id, &m, l1, psi, 1e-5).unwrap();
        let f2 = pffm(&id, &m, l2, psi, 1e-5).unwrap();
        let dist = f1.values().iter().zip(f2.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let want = dl * psi * m.norm() * 8f64.sqrt();
        prop_assert!((dist - want).abs() < 1e-5, "{dist} vs {want}");
    }

    #[test]
    fn projection_is_linear(seed in any::<u64>(), a in -3.0f32..3.0, d in prop::sample::select(vec![64usize, 2048])) {
        let cfg = SemanticConfig { global_dim: 32, embed_dim: d, ..SemanticConfig::default() };
        let raw = mock_extract("eve", SeededGenerator::new(seed), &cfg).unwrap();
        let proj = FrozenProjection::seeded(SeededGenerator::new(seed ^ 3), &cfg).unwrap();
        let base = fuse_project(&raw, &proj).unwrap();
        let scaled = fuse_project(&raw.scaled(a).unwrap(), &proj).unwrap();
        let off = proj.offset();
        for r in 0..8 {
            for (c, &o) in off.iter().enumerate() {
                let lhs = scaled.matrix().get(r, c) as f64 - o as f64;
                let rhs = a as f64 * (base.matrix().get(r, c) as f64 - o as f64);
                prop_assert!((lhs - rhs).abs() < 1e-5, "r{} c{}: {} vs {}", r, c, lhs, rhs);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), nq in 1usize..8, nk in 1usize..8, d in 1usize..16, scale in 0.1f32..20.0) {
        let q = seeded_matrix(seed, nq, d, scale);
        let k = seeded_matrix(seed ^ 1, nk, d, scale);
        for row in attention_weights(&q, &k).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_sum_identity(t in 1usize..200, base in 0.0f64..5.0) {
        let g = build_grid(t, base, 1, 0.8).unwrap();
        let sum: f64 = (0..t).map(|i| g.lambda_at(i).unwrap()).sum();
        prop_assert!((sum - base * (t as f64 + 1.0) / 2.0).abs() < 1e-9 * (1.0 + base * t as f64));
        for i in 0..t {
            prop_assert!(g.lambda_at(i).unwrap() >= g.lambda_at(i + 1).unwrap());
        }
    }
}

#[test]
fn token_provenance_is_exact() {
    let cfg = SemanticConfig {
        global_dim: 32,
        embed_dim: 64,
        ..SemanticConfig::default()
    };
    let raw = mock_extract("frank", SeededGenerator::new(1), &cfg).unwrap();
    let proj = FrozenProjection::seeded(SeededGenerator::new(2), &cfg).unwrap();
    let base = fuse_project(&raw, &proj).unwrap();

    let no_local = RawIdFeatures {
        global: raw.global.clone(),
        local: TokenMatrix::zeros(4, 32).unwrap(),
    };
    let out = fuse_project(&no_local, &proj).unwrap();
    for r in 0..8 {
        if r < 4 {
            assert_eq!(out.matrix().row(r), proj.offset());
        } else {
            assert_eq!(out.matrix().row(r), base.matrix().row(r));
        }
    }

    let no_global = RawIdFeatures {
        global: vec![0.0; 32],
        local: raw.local.clone(),
    };
    let out = fuse_project(&no_global, &proj).unwrap();
    for r in 0..8 {
        if r < 4 {
            assert_eq!(out.matrix().row(r), base.matrix().row(r));
        } else {
            assert_eq!(out.matrix().row(r), proj.offset());
        }
    }
}

#[test]
fn id_token_permutation_invariance() {
    let dit = Dit::seeded(DitConfig {
        id_dim: 64,
        weight_seed: 4,
        ..DitConfig::default()
    })
    .unwrap();
    let w = dit.id_weights(1);
    let img = seeded_matrix(10, 16, 64, 1.0);
    let kv = seeded_matrix(11, 8, 64, 1.0);
    let bias = seeded_matrix(12, 8, 64, 1.0);
    let base = id_cross_attention(&img, &kv, &bias, 0.8, w).unwrap();

    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let permute = |m: &TokenMatrix| {
        TokenMatrix::from_rows(&perm.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
            .unwrap()
    };
    let out = id_cross_attention(&img, &permute(&kv), &permute(&bias), 0.8, w).unwrap();
    for (a, b) in base.data().iter().zip(out.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn attention_is_affine_in_alpha() {
    for case in 0..10u64 {
        let q = seeded_matrix(case, 5, 8, 1.0);
        let k = seeded_matrix(case + 100, 6, 8, 1.0);
        let v = seeded_matrix(case + 200, 6, 3, 1.0);
        let f = seeded_matrix(case + 300, 6, 3, 1.0);
        let run = |alpha| {
            attend(&AttentionIO {
                q: &q,
                k: &k,
                v: &v,
                bias: Some(&f),
                alpha,
            })
            .unwrap()
        };
        let (o0, o1, o2) = (run(0.0), run(0.6), run(1.2));
        for i in 0..o0.data().len() {
            let lhs = o2.data()[i] as f64 - o0.data()[i] as f64;
            let rhs = 2.0 * (o1.data()[i] as f64 - o0.data()[i] as f64);
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }
}

#[test]
fn dit_preserves_shape_across_configs() {
    for (c, h, w, p, heads) in [
        (16, 8, 8, 2, 4),
        (4, 6, 4, 2, 2),
        (3, 5, 5, 1, 1),
        (16, 4, 12, 4, 8),
    ] {
        let dit = Dit::seeded(DitConfig {
            channels: c,
            patch: p,
            heads,
            layers: 2,
            id_dim: 32,
            ..DitConfig::default()
        })
        .unwrap();
        let z = synth_latent(SeededGenerator::new(1), c, h, w, SynthFamily::Gaussian).unwrap();
        let cond = Conditioning {
            kv_tokens: seeded_matrix(2, 3, 32, 1.0),
            bias_tokens: seeded_matrix(3, 3, 32, 1.0),
            prompt: None,
        };
        let out = dit.forward(&z, &cond, 0.4, &[0.8, 0.8]).unwrap();
        assert_eq!(out.shape(), z.shape());
    }
}

#[test]
fn normalized_rows_match_oracle_at_both_widths() {
    for d in [64usize, 2048] {
        let id = IdEmbedding(seeded_matrix(d as u64, 8, d, 2.0));
        let norm = NormalizedId::new(&id, 1e-5).unwrap();
        for r in 0..8 {
            let want = norm_oracle(id.matrix().row(r), 1e-5);
            for (a, b) in norm.matrix().row(r).iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }
}
