//! Seeded desk-scale corpus generator.
//!
//! Each item gets one category and 2-5 feature terms drawn from that
//! category's pool. Ratings come from a latent user-item affinity plus user
//! and item offsets, so rating prediction is learnable. Every explanation names
//! at least one feature of its item; higher ratings make persuasive wording
//! more likely.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Corpus, Interaction, Item};
use crate::exec::stream_rng;

const FEATURE_POOL: &[&str] = &[
    "taste",
    "scent",
    "texture",
    "price",
    "color",
    "size",
    "quality",
    "packaging",
    "flavor",
    "fit",
    "battery",
    "sound",
    "screen",
    "comfort",
    "design",
    "weight",
    "durability",
    "formula",
    "finish",
    "moisture",
    "coverage",
    "shine",
    "volume",
    "softness",
    "grip",
    "material",
    "stitching",
    "brightness",
    "aroma",
    "sweetness",
    "crunch",
    "freshness",
    "portion",
    "lather",
    "foam",
    "thickness",
    "warmth",
    "fabric",
    "sole",
    "strap",
    "zipper",
    "lens",
    "zoom",
    "charge",
    "cable",
    "noise",
    "bass",
    "smell",
];

const CATEGORY_NAMES: &[&str] = &[
    "skin care",
    "hair care",
    "fragrance",
    "makeup",
    "snacks",
    "beverages",
    "footwear",
    "apparel",
    "audio",
    "cameras",
];

const NEUTRAL_ADJ: &[&str] = &["good", "nice", "fine", "decent", "okay", "soft", "light", "solid"];
const PERSUASIVE_ADJ: &[&str] = &["amazing", "perfect", "excellent", "wonderful", "fantastic"];
const PERSUASIVE_CLOSERS: &[&str] = &[
    "i love it",
    "highly recommend",
    "worth every penny",
    "my new favorite",
    "the best",
];
const PLAIN_CLOSERS: &[&str] = &["for the money", "so far", "overall"];

const FEATURES_PER_CATEGORY: usize = 8;
const LATENT_DIM: usize = 3;

/// Generates a deterministic corpus for the given seed.
///
/// Users get between 5 and 10 interactions (fewer only when the catalogue is
/// smaller than that), so every user can be split with leave-last.
pub fn gen_synthetic(n_users: usize, n_items: usize, n_categories: usize, seed: u64) -> Corpus {
    assert!(
        n_users >= 1 && n_items >= 1 && n_categories >= 1,
        "all counts must be >= 1"
    );
    let mut rng = stream_rng(seed, 0);

    let category_names: Vec<String> = (0..n_categories)
        .map(|c| match CATEGORY_NAMES.get(c) {
            Some(name) => name.to_string(),
            None => format!("category {c}"),
        })
        .collect();
    let pools: Vec<Vec<&str>> = (0..n_categories)
        .map(|_| {
            FEATURE_POOL
                .choose_multiple(&mut rng, FEATURES_PER_CATEGORY)
                .copied()
                .collect()
        })
        .collect();

    let mut items = Vec::with_capacity(n_items);
    let mut item_latent = Vec::with_capacity(n_items);
    let mut item_bias = Vec::with_capacity(n_items);
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); n_categories];
    for i in 0..n_items {
        let cat = i % n_categories;
        let n_feat = rng.gen_range(2..=5);
        let mut features: Vec<String> = pools[cat]
            .choose_multiple(&mut rng, n_feat)
            .map(|s| s.to_string())
            .collect();
        features.sort();
        let name = &category_names[cat];
        items.push(Item {
            item_id: format!("i{i:04}"),
            title: format!("{} product {}", title_case(name), i),
            description: format!("A {} product with notable {}.", name, features.join(", ")),
            category: name.clone(),
            features,
        });
        item_latent.push(latent(&mut rng));
        item_bias.push(rng.gen_range(-0.6..0.6));
        by_category[cat].push(i);
    }

    let mut interactions = Vec::new();
    let user_ids: Vec<String> = (0..n_users).map(|u| format!("u{u:04}")).collect();
    for u in 0..n_users {
        let z_u = latent(&mut rng);
        let b_u: f64 = rng.gen_range(-0.6..0.6);
        let prefs: Vec<f64> = (0..n_categories).map(|_| rng.gen::<f64>().powi(3) + 0.02).collect();
        let n_inter = rng.gen_range(5..=10).min(n_items);
        let mut chosen: Vec<usize> = Vec::with_capacity(n_inter);
        while chosen.len() < n_inter {
            let cat = weighted_index(&prefs, &mut rng);
            let candidates: Vec<usize> = by_category[cat]
                .iter()
                .copied()
                .filter(|v| !chosen.contains(v))
                .collect();
            if let Some(&v) = candidates.choose(&mut rng) {
                chosen.push(v);
            }
        }
        for v in chosen {
            let affinity: f64 = z_u.iter().zip(&item_latent[v]).map(|(a, b)| a * b).sum();
            let noise: f64 = rng.gen_range(-0.5..0.5);
            let rating = (3.2 + b_u + item_bias[v] + 1.2 * affinity + noise)
                .round()
                .clamp(1.0, 5.0);
            let explanation = explanation(&items[v], rating, &mut rng);
            interactions.push(Interaction {
                user: u,
                item: v,
                rating,
                explanation,
            });
        }
    }
    Corpus::from_parts(items, user_ids, interactions)
}

fn latent(rng: &mut impl Rng) -> [f64; LATENT_DIM] {
    let mut z = [0.0; LATENT_DIM];
    for x in &mut z {
        *x = rng.gen_range(-1.0..1.0);
    }
    z
}

fn weighted_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<String>>()
        .join(" ")
}

fn explanation(item: &Item, rating: f64, rng: &mut impl Rng) -> String {
    let p_persuade = 0.1 + 0.15 * (rating - 1.0);
    let adj = |rng: &mut dyn rand::RngCore| -> &'static str {
        if rng.gen::<f64>() < p_persuade {
            PERSUASIVE_ADJ.choose(rng).unwrap()
        } else {
            NEUTRAL_ADJ.choose(rng).unwrap()
        }
    };
    let n_feat = if item.features.len() >= 2 && rng.gen::<f64>() < 0.3 {
        2
    } else {
        1
    };
    let feats: Vec<&String> = item.features.choose_multiple(rng, n_feat).collect();
    let mut text = match (feats.as_slice(), rng.gen_range(0..3)) {
        ([f], 0) => format!("the {} is {}", f, adj(rng)),
        ([f], 1) => format!("{} {} and easy to use", adj(rng), f),
        ([f], _) => format!("i like the {} a lot", f),
        ([f, g], 0) => format!("the {} is {} and the {} is {}", f, adj(rng), g, adj(rng)),
        ([f, g], _) => format!("i like the {} and the {}", f, g),
        _ => unreachable!(),
    };
    if rng.gen::<f64>() < p_persuade * 0.5 {
        text.push(' ');
        text.push_str(PERSUASIVE_CLOSERS.choose(rng).unwrap());
    } else if rng.gen::<f64>() < 0.2 {
        text.push(' ');
        text.push_str(PLAIN_CLOSERS.choose(rng).unwrap());
    }
    text
}
