//! Deterministic stand-in captioner for toy scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlmir_data::{derive_seed, ToyScene};

use crate::error::{CaptionError, Result};
use crate::provider::CaptionSource;

/// Word-level confusions used to corrupt LQ captions.
const CONFUSIONS: &[(&str, &str)] = &[
    ("red", "orange"),
    ("orange", "red"),
    ("yellow", "white"),
    ("green", "blue"),
    ("blue", "purple"),
    ("purple", "blue"),
    ("white", "yellow"),
    ("black", "brown"),
    ("gray", "white"),
    ("beige", "yellow"),
    ("teal", "green"),
    ("brown", "black"),
    ("pink", "red"),
    ("circle", "ring"),
    ("ring", "circle"),
    ("square", "triangle"),
    ("triangle", "square"),
    ("striped", "checkered"),
    ("checkered", "striped"),
    ("dotted", "plain"),
    ("plain", "dotted"),
];

fn confuse(word: &str) -> &str {
    CONFUSIONS
        .iter()
        .find(|(a, _)| *a == word)
        .map(|(_, b)| *b)
        .unwrap_or(word)
}

#[derive(Debug, Clone)]
pub struct MockCaptioner {
    /// Per-content-word probability of corruption for LQ captions.
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Default for MockCaptioner {
    fn default() -> Self {
        Self {
            corruption_rate: 0.3,
            seed: 0,
        }
    }
}

enum Slot {
    /// Colors and textures may be swapped or dropped.
    Adjective(String),
    /// Shapes may only be swapped.
    Noun(String),
}

fn phrase(slots: &[Option<String>]) -> String {
    slots.iter().flatten().cloned().collect::<Vec<_>>().join(" ")
}

impl MockCaptioner {
    pub fn new(corruption_rate: f64, seed: u64) -> Self {
        Self { corruption_rate, seed }
    }

    /// `a photo of {objects} on a {background}`; LQ captions get seeded
    /// word swaps and drops.
    pub fn caption(&self, image_id: &str, scene: Option<&ToyScene>, source: CaptionSource) -> Result<String> {
        let scene = scene.ok_or_else(|| CaptionError::MissingMetadata(image_id.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, image_id));
        let corrupt = source == CaptionSource::Lq && self.corruption_rate > 0.0;
        let mut render = |slot: Slot| -> Option<String> {
            let (word, droppable) = match &slot {
                Slot::Adjective(w) => (w.as_str(), true),
                Slot::Noun(w) => (w.as_str(), false),
            };
            if corrupt && rng.random_bool(self.corruption_rate.clamp(0.0, 1.0)) {
                if droppable && rng.random_bool(0.5) {
                    return None;
                }
                return Some(confuse(word).to_string());
            }
            Some(word.to_string())
        };

        let objects: Vec<String> = scene
            .objects
            .iter()
            .map(|o| {
                let color = render(Slot::Adjective(o.color.clone()));
                let shape = render(Slot::Noun(o.shape.clone()));
                format!("a {}", phrase(&[color, shape]))
            })
            .collect();
        let objects = match objects.len() {
            0 => "nothing".to_string(),
            1 => objects[0].clone(),
            n => format!("{} and {}", objects[..n - 1].join(", "), objects[n - 1]),
        };
        let color = render(Slot::Adjective(scene.background.color.clone()));
        let texture = match scene.background.texture.as_str() {
            "plain" => None,
            t => render(Slot::Adjective(t.to_string())),
        };
        let background = phrase(&[color, texture]);
        Ok(if background.is_empty() {
            format!("a photo of {objects} on a background")
        } else {
            format!("a photo of {objects} on a {background} background")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_caption_is_the_clean_template() {
        let scene = ToyScene::random("s", 1);
        let cap = MockCaptioner::default()
            .caption("s", Some(&scene), CaptionSource::Gt)
            .unwrap();
        assert!(cap.starts_with("a photo of a "));
        assert!(cap.contains(&scene.objects[0].color));
        assert!(cap.contains(&scene.objects[0].shape));
        assert!(cap.ends_with(" background"));
    }

    #[test]
    fn deterministic_per_id_and_source() {
        let m = MockCaptioner::new(0.5, 3);
        let scene = ToyScene::random("s", 2);
        for source in [CaptionSource::Gt, CaptionSource::Lq] {
            assert_eq!(
                m.caption("x", Some(&scene), source).unwrap(),
                m.caption("x", Some(&scene), source).unwrap()
            );
        }
    }

    #[test]
    fn zero_rate_lq_equals_gt_and_high_rate_differs() {
        let scene = ToyScene::random("s", 4);
        let clean = MockCaptioner::new(0.0, 0);
        assert_eq!(
            clean.caption("x", Some(&scene), CaptionSource::Lq).unwrap(),
            clean.caption("x", Some(&scene), CaptionSource::Gt).unwrap()
        );
        let noisy = MockCaptioner::new(1.0, 0);
        assert_ne!(
            noisy.caption("x", Some(&scene), CaptionSource::Lq).unwrap(),
            noisy.caption("x", Some(&scene), CaptionSource::Gt).unwrap()
        );
    }

    #[test]
    fn missing_metadata_is_an_error() {
        assert!(matches!(
            MockCaptioner::default().caption("x", None, CaptionSource::Gt),
            Err(CaptionError::MissingMetadata(_))
        ));
    }
}
