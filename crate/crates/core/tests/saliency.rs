use rand::Rng;
use sgm_core::data::{generate_cohort, CohortGenConfig, OrganSchema, OrganSet};
use sgm_core::eval::saliency_trajectory;
use sgm_core::model::{AttentionCapture, CaptureMode, Encoder, HeadSpec, ModelConfig, ViewInput};
use sgm_core::rng::{stream, Purpose};
use sgm_core::sgm::{organ_saliency, SaliencyProxy};

fn desk_encoder(seed: u64) -> (Encoder, sgm_core::tensor::ParamStore) {
    let cfg = ModelConfig::default();
    Encoder::new(cfg, OrganSchema::desk(), HeadSpec::Dino { hidden: 64, out: 64 }, seed).unwrap()
}

#[test]
fn organ_scores_and_cls_mass_sum_to_one() {
    let schema = OrganSchema::desk();
    let cohort = generate_cohort(
        &CohortGenConfig {
            n_participants: 64,
            ..CohortGenConfig::default()
        },
        &schema,
    )
    .unwrap();
    for seed in 0..3 {
        let (enc, mut store) = desk_encoder(seed);
        // Sharper attention than the near-uniform initialization.
        let mut rng = stream(seed, Purpose::Init);
        for e in store.entries_mut() {
            if e.name.contains("attn.wq") || e.name.contains("attn.wk") {
                for v in e.value.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let views: Vec<ViewInput<'_>> = cohort.records.iter().map(ViewInput::full).collect();
        let caps = enc.capture(&store, &views, CaptureMode::ClsRows).unwrap();
        for (r, cap) in cohort.records.iter().zip(&caps) {
            for proxy in [SaliencyProxy::LastLayer, SaliencyProxy::AllLayerAverage] {
                let all = OrganSet::all(schema.len());
                let (scores, cls) = organ_saliency(cap, &schema, all, proxy).unwrap();
                let total: f64 = scores.iter().flatten().sum::<f64>() + cls;
                assert!((total - 1.0).abs() <= 1e-6, "{}: {total}", r.id);
                let (avail_scores, _) = organ_saliency(cap, &schema, r.availability(), proxy).unwrap();
                for (o, s) in avail_scores.iter().enumerate() {
                    assert_eq!(s.is_some(), r.is_available(o));
                }
            }
        }
    }
}

fn synthetic_capture(layers: usize, n: usize, matrices: Vec<Vec<f64>>) -> AttentionCapture {
    let cls_rows = matrices.iter().flat_map(|m| m[..n].to_vec()).collect();
    AttentionCapture {
        layers,
        heads: 1,
        n,
        cls_rows,
        full: Some(matrices.concat()),
    }
}

fn two_organ_schema() -> OrganSchema {
    use sgm_core::data::OrganSpec;
    OrganSchema::new(vec![OrganSpec::new("A", 2, 2), OrganSpec::new("B", 2, 1)]).unwrap()
}

#[test]
fn rollout_of_identity_attention_keeps_everything_on_cls() {
    let schema = two_organ_schema();
    let n = 4;
    let eye: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    let cap = synthetic_capture(3, n, vec![eye.clone(), eye.clone(), eye]);
    let (scores, cls) = organ_saliency(&cap, &schema, OrganSet::all(2), SaliencyProxy::Rollout).unwrap();
    assert_eq!(cls, 1.0);
    assert_eq!(scores, vec![Some(0.0), Some(0.0)]);
}

/// Row-stochastic random matrix.
fn stochastic(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.01..1.0)).collect();
    for r in m.chunks_mut(n) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    m
}

#[test]
fn rollout_matches_explicit_matrix_product() {
    let schema = two_organ_schema();
    let n = 4;
    let mut rng = stream(5, Purpose::Init);
    for _ in 0..20 {
        let mats: Vec<Vec<f64>> = (0..3).map(|_| stochastic(n, &mut rng)).collect();
        // R = Â_3 Â_2 Â_1 with Â = (A + I) / 2.
        let adj = |m: &[f64]| -> Vec<f64> {
            (0..n * n)
                .map(|k| 0.5 * m[k] + if k / n == k % n { 0.5 } else { 0.0 })
                .collect()
        };
        let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        c[i * n + j] += a[i * n + k] * b[k * n + j];
                    }
                }
            }
            c
        };
        let mut r = adj(&mats[2]);
        for l in (0..2).rev() {
            r = mul(&r, &adj(&mats[l]));
        }
        let cap = synthetic_capture(3, n, mats);
        let (scores, cls) = organ_saliency(&cap, &schema, OrganSet::all(2), SaliencyProxy::Rollout).unwrap();
        assert!((cls - r[0]).abs() < 1e-12);
        assert!((scores[0].unwrap() - r[1] - r[2]).abs() < 1e-12);
        assert!((scores[1].unwrap() - r[3]).abs() < 1e-12);
        assert!((cls + scores[0].unwrap() + scores[1].unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rollout_without_full_matrices_is_an_error() {
    let schema = two_organ_schema();
    let mut cap = synthetic_capture(1, 4, vec![vec![0.25; 16]]);
    cap.full = None;
    assert!(organ_saliency(&cap, &schema, OrganSet::all(2), SaliencyProxy::Rollout).is_err());
}

#[test]
fn fresh_init_saliency_tracks_token_footprint() {
    let schema = OrganSchema::desk();
    let cohort = generate_cohort(
        &CohortGenConfig {
            n_participants: 256,
            ..CohortGenConfig::default()
        },
        &schema,
    )
    .unwrap();
    let n1 = (schema.n_tokens() + 1) as f64;
    for seed in 0..5 {
        let (enc, store) = desk_encoder(seed);
        let rows = saliency_trajectory(&enc, &[(0, &store)], &cohort.records, SaliencyProxy::AllLayerAverage).unwrap();
        let total: f64 = rows[0].organ_shares.iter().sum::<f64>() + rows[0].cls_share;
        assert!((total - 1.0).abs() < 1e-9);
        for (o, share) in rows[0].organ_shares.iter().enumerate() {
            let prior = schema.organ(o).token_count as f64 / n1;
            assert!(
                (share - prior).abs() <= 0.05,
                "seed {seed} {}: {share} vs {prior}",
                schema.organ(o).name
            );
        }
    }
}
