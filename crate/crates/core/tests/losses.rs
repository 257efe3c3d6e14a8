use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cfsg_core::hierarchy::build_hierarchy;
use cfsg_core::losses::{
    common_granularity_similarity, common_sibling_similarity, disentanglement_loss, record_losses,
    specific_divergence, total_loss,
};
use cfsg_core::model::{Mode, ModelConfig, Part};
use cfsg_core::numkernel::Tape;
use cfsg_core::{CfsgModel, HierarchySpec, LossCoefficients, PartitionSpec, StructuredFeatures, Tensor, Toggles};

const B: usize = 8;
const L: usize = 3;

fn features(values: &[f64], p: &PartitionSpec, scale: f64) -> StructuredFeatures {
    let mut it = values.iter().map(|v| v * scale);
    let mut block = |part: Part| {
        let w = p.size(part);
        let data: Vec<f64> = (0..B * w * L).map(|_| it.next().unwrap()).collect();
        Tensor::new(vec![B, w, L], data).unwrap()
    };
    StructuredFeatures {
        common: block(Part::Common),
        specific: block(Part::Specific),
        confounding: block(Part::Confounding),
    }
}

fn class_means(f: &StructuredFeatures, part: Part, labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (b, &k) in labels.iter().enumerate() {
        let v = f.pooled(b).part(part).to_vec();
        let e = sums.entry(k).or_insert_with(|| (vec![0.0; v.len()], 0));
        for (s, x) in e.0.iter_mut().zip(&v) {
            *s += x;
        }
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

/// Every cosine-based term at feature scale `scale`.
fn cosine_terms(values: &[Vec<f64>], scale: f64) -> [f64; 4] {
    let p = PartitionSpec::new(4, 3, 2).unwrap();
    let h = build_hierarchy(vec![4, 2], vec![vec![0, 0, 1, 1]]).unwrap();
    let levels: Vec<StructuredFeatures> = values.iter().map(|v| features(v, &p, scale)).collect();
    let fine: Vec<usize> = (0..B).map(|i| i % 4).collect();
    let coarse: Vec<usize> = fine.iter().map(|&k| k / 2).collect();
    let commons: Vec<Tensor> = levels.iter().map(|f| f.common.clone()).collect();
    [
        disentanglement_loss(&levels).unwrap(),
        common_granularity_similarity(&commons).unwrap(),
        common_sibling_similarity(&[class_means(&levels[0], Part::Common, &fine)], &h).unwrap(),
        specific_divergence(
            &[
                class_means(&levels[0], Part::Specific, &fine),
                class_means(&levels[1], Part::Specific, &coarse),
            ],
            &[4, 2],
        )
        .unwrap(),
    ]
}

proptest! {
    #[test]
    fn cosine_terms_ignore_feature_scale(
        a in prop::collection::vec(0.05f64..3.0, B * 9 * L),
        b in prop::collection::vec(0.05f64..3.0, B * 9 * L),
    ) {
        let levels = vec![a, b];
        let base = cosine_terms(&levels, 1.0);
        let scaled = cosine_terms(&levels, 3.7);
        for (x, y) in base.iter().zip(&scaled) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

fn forward_terms(seed: u64, toggles: Toggles) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = HierarchySpec::benchmark();
    let cfg = ModelConfig {
        input_dim: 12,
        hidden: 16,
        raw_channels: 8,
        spatial_len: 3,
        partition: PartitionSpec::new(5, 3, 2).unwrap(),
        class_counts: h.class_counts().to_vec(),
        dual_backbone: seed.is_multiple_of(2),
        learnable_lambda: false,
    };
    let model = CfsgModel::init(&cfg, &mut rng).unwrap();
    let fine: Vec<usize> = (0..24).map(|i| i % 8).collect();
    let labels: Vec<Vec<usize>> = (0..3)
        .map(|g| fine.iter().map(|&k| h.label_vector(k).unwrap()[g]).collect())
        .collect();
    let x: Vec<f64> = (0..24 * 12).map(|i| ((i * 7919) % 97) as f64 / 48.0 - 1.0).collect();
    let k = LossCoefficients {
        eps_fuse: 0.3 + 0.1 * seed as f64,
        lambda_cs: 0.7,
        lambda_cd: 1.9,
        lambda_sp: 0.45,
    };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let xv = tape.constant(Tensor::matrix(24, 12, x).unwrap());
    let pass = model.forward(&mut tape, &vars, xv, Mode::Train).unwrap();
    let lv = record_losses(&mut tape, &pass, &labels, &h, &model.partition, &k, toggles).unwrap();
    let components = lv.components(&tape);
    let fused = tape.scalar(lv.total);
    assert_eq!(fused.to_bits(), total_loss(&components, &k, toggles).to_bits());
    if !toggles.enable_fs {
        let plain = components.l_c + components.l_f + components.l_lf;
        assert_eq!(fused.to_bits(), plain.to_bits());
    }
}

#[test]
fn fused_total_equals_summed_terms_bit_for_bit() {
    for seed in 0..4 {
        for enable_fs in [true, false] {
            forward_terms(
                seed,
                Toggles {
                    enable_fs,
                    enable_cs: true,
                },
            );
        }
    }
}
