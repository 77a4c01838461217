//! Seeded synthetic inputs: a skewed taxonomy with aligned embeddings, model
//! weights with latents drawn from them, prediction tables and RD curves.

use crate::clustering::EmbeddingSet;
use crate::codec::{sample_hyperlatent, sample_latent, CodecError, CodecOptions};
use crate::eval::{Prediction, PredictionTable, RdPoint};
use crate::latent::LatentTensor;
use crate::models::ModelBundle;
use crate::rng::Lcg64;
use crate::taxonomy::Taxonomy;

const ANIMAL_GROUPS: [&str; 9] = [
    "bird",
    "fish",
    "reptile",
    "amphibian",
    "canine",
    "feline",
    "primate",
    "rodent",
    "ungulate",
];
const LEAVES_PER_GROUP: usize = 10;

/// 100 leaf classes: nine groups under `animal/chordate/vertebrate` and one
/// (`vehicle`) directly under `artifact`, so 90% of the leaves share one
/// subtree and leaf depths differ by two between the branches.
pub fn skewed_taxonomy() -> String {
    let mut edges = vec![
        ("entity".to_owned(), "-".to_owned()),
        ("animal".into(), "entity".into()),
        ("chordate".into(), "animal".into()),
        ("vertebrate".into(), "chordate".into()),
        ("artifact".into(), "entity".into()),
        ("vehicle".into(), "artifact".into()),
    ];
    for g in ANIMAL_GROUPS {
        edges.push((g.into(), "vertebrate".into()));
    }
    for g in ANIMAL_GROUPS.iter().chain(&["vehicle"]) {
        for i in 0..LEAVES_PER_GROUP {
            edges.push((format!("{g}_{i:02}"), (*g).into()));
        }
    }
    edges.iter().map(|(c, p)| format!("{c}\t{p}\n")).collect()
}

fn random_unit(dim: usize, rng: &mut Lcg64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unnormalized leaf embeddings `u(top) + u(parent) + 0.25 * noise`, where
/// `u(node)` is a seeded random unit direction per taxonomy node and `top`
/// is the leaf's ancestor just below the root. Rows follow sorted leaf order.
pub fn hierarchical_embeddings(t: &Taxonomy, dim: usize, seed: u64) -> EmbeddingSet {
    let mut rng = Lcg64::new(seed);
    let mut names: Vec<&str> = t.names().collect();
    names.sort_unstable();
    let dirs: std::collections::BTreeMap<&str, Vec<f64>> = names
        .iter()
        .map(|&n| (n, random_unit(dim, &mut rng)))
        .collect();
    let leaves = t.leaves();
    let mut vectors = Vec::with_capacity(leaves.len() * dim);
    for &leaf in &leaves {
        let id = t.id(leaf).expect("leaf of t");
        let top = t.name(t.ancestor_at_depth(id, 2.min(t.depth_of(id))));
        let parent = t.parent_of(id).map_or(leaf, |p| t.name(p));
        for j in 0..dim {
            vectors.push(dirs[top][j] + dirs[parent][j] + 0.25 * rng.normal());
        }
    }
    let labels = leaves.iter().map(|s| (*s).to_owned()).collect();
    EmbeddingSet::new(dim, vectors, labels).expect("nonempty fixture")
}

/// Eight unit vectors in two tight antipodal bundles on the circle.
pub fn two_bundle_points() -> EmbeddingSet {
    let angles = [0.0, 0.05, -0.04, 0.09, 3.10, 3.16, 3.21, 3.07];
    let vectors = angles
        .iter()
        .flat_map(|a: &f64| [a.cos(), a.sin()])
        .collect();
    let labels = (0..8).map(|i| format!("p{i}")).collect();
    EmbeddingSet::new(2, vectors, labels).expect("eight points")
}

/// A latent and hyperlatent sampled from the bundle's own predictions.
pub fn codec_instance(
    bundle: &ModelBundle,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(LatentTensor, LatentTensor), CodecError> {
    let mut rng = Lcg64::new(seed);
    let z = sample_hyperlatent(bundle, height, width, &mut rng);
    let y = sample_latent(
        bundle,
        &z,
        height,
        width,
        &CodecOptions::default(),
        &mut rng,
    )?;
    Ok((y, z))
}

/// `images` rows per level `1..=3`. A prediction is exact with probability
/// 0.9, 0.7, 0.5 at levels 1, 2, 3; otherwise it is a sibling leaf with
/// probability 0.6, else any leaf.
pub fn predictions(t: &Taxonomy, images: usize, seed: u64) -> PredictionTable {
    let mut rng = Lcg64::new(seed);
    let leaves = t.leaves();
    let mut rows = Vec::new();
    for i in 0..images {
        let truth = leaves[rng.below(leaves.len())];
        let parent = t
            .parent_of(t.id(truth).expect("leaf"))
            .expect("leaf below root");
        let siblings: Vec<&str> = leaves
            .iter()
            .copied()
            .filter(|&l| t.parent_of(t.id(l).expect("leaf")) == Some(parent))
            .collect();
        for (level, p_exact) in [(1, 0.9), (2, 0.7), (3, 0.5)] {
            let pred = if rng.next_f64() < p_exact {
                truth
            } else if rng.next_f64() < 0.6 {
                siblings[rng.below(siblings.len())]
            } else {
                leaves[rng.below(leaves.len())]
            };
            rows.push(Prediction {
                image_id: format!("img{i:04}"),
                level,
                pred_class: pred.to_owned(),
                true_class: truth.to_owned(),
            });
        }
    }
    PredictionTable { rows }
}

/// Two smooth rate-quality curves of five points per level; the second
/// reaches the same quality at roughly 3% to 7% lower rate.
pub fn rd_curves(seed: u64) -> (Vec<RdPoint>, Vec<RdPoint>) {
    let mut rng = Lcg64::new(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for level in 1..=3usize {
        let offset = 10.0 * level as f64;
        for i in 0..5 {
            let bpp = 0.05 * 1.6f64.powi(i) * (1.0 + 0.3 * level as f64);
            let quality = offset + 40.0 + 8.0 * bpp.ln() + rng.uniform(-0.2, 0.2);
            a.push(RdPoint {
                level,
                bpp,
                quality,
            });
            let saving = rng.uniform(0.93, 0.97);
            b.push(RdPoint {
                level,
                bpp: bpp * saving,
                quality: quality + rng.uniform(-0.05, 0.05),
            });
        }
    }
    (a, b)
}
