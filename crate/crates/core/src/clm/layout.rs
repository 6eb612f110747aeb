use rand::Rng as _;

use crate::dualencoder::Embedding;
use crate::rng::Rng;
use crate::vocab::{Vocab, CLS, SEP, UNK};
use crate::{Error, Result};

/// One decoder input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Token(usize),
    /// The dense embedding, fed in place of a token-table row.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    TextTraining,
    Generation,
}

/// Decoder input: `[cls][prefix][sep]`, then optionally anchors and a closing `[sep]`,
/// then (for training) the caption and a terminal `[cls]`.
///
/// `loss_mask[i]` is 1 when slot `i` is a supervised target, i.e. a caption token or
/// the terminal `[cls]`; the logits at position `i - 1` predict it.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub slots: Vec<Slot>,
    pub prefix: Embedding,
    pub loss_mask: Vec<f64>,
    pub kind: LayoutKind,
    pub anchors_present: bool,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of supervised targets.
    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m != 0.0).count()
    }

    /// Token ids of the slots after the prefix.
    pub fn token_ids(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Token(t) => Some(*t),
                Slot::Prefix => None,
            })
            .collect()
    }
}

/// The conditioning part shared by training and generation: `[cls][prefix][sep]`,
/// plus `anchor ids + [sep]`. Anchors are never dropped here; with no anchors the
/// closing `[sep]` follows immediately.
pub fn prefix_slots(anchor_ids: &[usize]) -> Vec<Slot> {
    let mut slots = vec![Slot::Token(CLS), Slot::Prefix, Slot::Token(SEP)];
    slots.extend(anchor_ids.iter().map(|&a| Slot::Token(a)));
    slots.push(Slot::Token(SEP));
    slots
}

/// Training layout for one caption. With probability `q` every anchor is removed (never a
/// subset), leaving `[cls][F][sep][sep] caption [cls]`. One random draw is consumed per
/// call whether or not anchors are present.
pub fn build_training_input(
    f_t: &Embedding,
    anchors: &[String],
    caption: &[String],
    q: f64,
    rng: &mut Rng,
    vocab: &Vocab,
    max_len: usize,
) -> Result<InputSequence> {
    if caption.is_empty() {
        return Err(Error::Empty("training caption is empty".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidSpec(format!("anchor dropout {q} outside [0, 1]")));
    }
    let drop = rng.random_bool(q);
    let anchor_ids = if drop { Vec::new() } else { vocab.encode(anchors)? };
    let caption_ids = vocab.encode(caption)?;
    let mut slots = prefix_slots(&anchor_ids);
    let head = slots.len();
    slots.extend(caption_ids.into_iter().map(Slot::Token));
    slots.push(Slot::Token(CLS));
    if slots.len() > max_len {
        return Err(Error::TooLong { len: slots.len(), max_len });
    }
    let mut loss_mask = vec![0.0; slots.len()];
    loss_mask[head..].iter_mut().for_each(|m| *m = 1.0);
    Ok(InputSequence {
        slots,
        prefix: f_t.clone(),
        loss_mask,
        kind: LayoutKind::TextTraining,
        anchors_present: !anchor_ids.is_empty(),
    })
}

/// Generation layout `[cls][F][sep] anchors [sep]` with an empty caption region. Labels
/// outside the vocabulary are dropped, as are repeats.
pub fn build_generation_input(f_i: &Embedding, anchors: &[String], vocab: &Vocab) -> InputSequence {
    let mut ids: Vec<usize> = Vec::new();
    for a in anchors {
        let id = vocab.id_or_unk(a);
        if id != UNK && !ids.contains(&id) {
            ids.push(id);
        }
    }
    let slots = prefix_slots(&ids);
    InputSequence {
        loss_mask: vec![0.0; slots.len()],
        slots,
        prefix: f_i.clone(),
        kind: LayoutKind::Generation,
        anchors_present: !ids.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn words(t: &str) -> Vec<String> {
        t.split_whitespace().map(String::from).collect()
    }

    fn vocab() -> Vocab {
        Vocab::from_words(words("a man with red helmet riding motorbike down the road dog ball")).unwrap()
    }

    fn render(v: &Vocab, s: &InputSequence) -> String {
        s.slots
            .iter()
            .map(|slot| match slot {
                Slot::Prefix => "[F]".to_string(),
                Slot::Token(t) => v.word(*t).unwrap().to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn anchored_layout() {
        let v = vocab();
        let f = Embedding::new(vec![0.5; 4]);
        let s = build_training_input(
            &f,
            &words("man helmet motorbike road"),
            &words("a man with a red helmet riding a motorbike down the road"),
            0.0,
            &mut substream(0, "t"),
            &v,
            48,
        )
        .unwrap();
        assert_eq!(
            render(&v, &s),
            "[cls] [F] [sep] man helmet motorbike road [sep] a man with a red helmet riding a motorbike down the road [cls]"
        );
        let mask: Vec<f64> = (0..s.len()).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect();
        assert_eq!(s.loss_mask, mask);
        assert_eq!(s.target_count(), 13);
    }

    #[test]
    fn full_dropout_matches_anchor_free_layout() {
        let v = vocab();
        let f = Embedding::new(vec![0.1; 4]);
        let cap = words("a dog");
        let dropped = build_training_input(&f, &words("dog"), &cap, 1.0, &mut substream(0, "t"), &v, 48).unwrap();
        assert_eq!(render(&v, &dropped), "[cls] [F] [sep] [sep] a dog [cls]");
        for q in [0.0, 0.3, 1.0] {
            let none = build_training_input(&f, &[], &cap, q, &mut substream(5, "t"), &v, 48).unwrap();
            assert_eq!(none, dropped);
        }
    }

    #[test]
    fn too_long_and_empty_rejected() {
        let v = vocab();
        let f = Embedding::new(vec![0.1; 4]);
        let r = build_training_input(&f, &[], &words("a dog a dog"), 0.0, &mut substream(0, "t"), &v, 8);
        assert!(matches!(r, Err(Error::TooLong { len: 9, max_len: 8 })));
        assert!(build_training_input(&f, &[], &[], 0.0, &mut substream(0, "t"), &v, 8).is_err());
    }

    #[test]
    fn generation_layout() {
        let v = vocab();
        let f = Embedding::new(vec![0.1; 4]);
        assert_eq!(render(&v, &build_generation_input(&f, &[], &v)), "[cls] [F] [sep] [sep]");
        let g = build_generation_input(&f, &words("dog ball"), &v);
        assert_eq!(render(&v, &g), "[cls] [F] [sep] dog ball [sep]");
        assert_eq!(g.kind, LayoutKind::Generation);
        let unknown = build_generation_input(&f, &words("dog zebra dog"), &v);
        assert_eq!(render(&v, &unknown), "[cls] [F] [sep] dog [sep]");
    }

    #[test]
    fn generation_prefix_equals_training_head() {
        let v = vocab();
        let f = Embedding::new(vec![0.3; 4]);
        let anchors = words("dog ball");
        let g = build_generation_input(&f, &anchors, &v);
        let t = build_training_input(&f, &anchors, &words("a dog"), 0.0, &mut substream(0, "t"), &v, 48).unwrap();
        assert_eq!(g.slots[..], t.slots[..g.len()]);
        assert_eq!(g.prefix, t.prefix);
    }
}
