//! Criteria that need no trained model: beam search, metrics and input layout, each
//! checked against an independent recomputation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use anchorcap::clm::{build_generation_input, build_training_input, Slot};
use anchorcap::dualencoder::Embedding;
use anchorcap::generation::{beam_search, greedy, log_softmax, BeamConfig, BeamHypothesis, StepModel};
use anchorcap::metrics::{cider_per_sample, evaluate_set, modified_precision, rouge_l, ROUGE_BETA_SQ};
use anchorcap::microworld::{build_dataset, extract_nouns, CaptionText, SplitSizes, WorldSpec};
use anchorcap::rng::substream;
use anchorcap::vocab::{Vocab, CLS, SEP};
use anyhow::{ensure, Result};
use rand::Rng as _;

// ---- beam search ----

const W0: usize = 4;
const W1: usize = 5;
const TOKENS: [usize; 3] = [CLS, W0, W1];

/// Next-token logits looked up by the full prefix. Only `[cls]`, `w0`, `w1` are
/// reachable; the other ids carry -inf.
struct TableModel {
    table: HashMap<Vec<usize>, Vec<f64>>,
}

impl TableModel {
    fn random(seed: u64, max_len: usize) -> Self {
        let mut rng = substream(seed, "acceptance-beam");
        let mut table = HashMap::new();
        let mut frontier = vec![vec![]];
        while let Some(p) = frontier.pop() {
            let mut logits = vec![f64::NEG_INFINITY; 6];
            for t in TOKENS {
                logits[t] = rng.random_range(-3.0..3.0);
            }
            table.insert(p.clone(), logits);
            if p.len() + 1 < max_len {
                for t in [W0, W1] {
                    let mut q = p.clone();
                    q.push(t);
                    frontier.push(q);
                }
            }
        }
        Self { table }
    }

    fn lp(&self, prefix: &[usize]) -> Vec<f64> {
        log_softmax(&self.table[prefix])
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;
    fn start(&self) -> anchorcap::Result<(Vec<usize>, Vec<f64>)> {
        Ok((vec![], self.lp(&[])))
    }
    fn advance(&self, s: &mut Vec<usize>, t: usize) -> anchorcap::Result<Vec<f64>> {
        s.push(t);
        Ok(self.lp(s))
    }
}

/// All complete sequences with their log-probabilities.
fn enumerate(m: &TableModel, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![], 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        let dist = m.lp(&seq);
        for t in TOKENS {
            let mut s: Vec<usize> = seq.clone();
            s.push(t);
            let l = lp + dist[t];
            if t == CLS || s.len() == max_len {
                out.push((s, l));
            } else {
                stack.push((s, l));
            }
        }
    }
    out
}

fn exhaustive_best(m: &TableModel, max_len: usize) -> (Vec<usize>, f64) {
    let mut all = enumerate(m, max_len);
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.swap_remove(0)
}

/// Argmax rollout written independently of the library's greedy decoder.
fn argmax_rollout(m: &TableModel, max_len: usize) -> (Vec<usize>, f64) {
    let (mut seq, mut total) = (Vec::new(), 0.0);
    loop {
        let dist = m.lp(&seq);
        let t = TOKENS.into_iter().fold(TOKENS[0], |b, t| if dist[t] > dist[b] || (dist[t] == dist[b] && t < b) { t } else { b });
        total += dist[t];
        seq.push(t);
        if t == CLS || seq.len() == max_len {
            return (seq, total);
        }
    }
}

pub fn beam(seeds: u64) -> Result<String> {
    let max_len = 5;
    let mut wide = 0;
    for seed in 0..seeds {
        let m = TableModel::random(seed, max_len);
        let n = enumerate(&m, max_len).len();
        let cfg = |w| BeamConfig { beam_width: w, max_len, length_normalize: false };

        let got = beam_search(&m, &cfg(n))?;
        let (tokens, lp) = exhaustive_best(&m, max_len);
        ensure!(got.tokens == tokens && got.log_prob == lp, "seed {seed}: width {n} gave {:?} {} vs exhaustive {tokens:?} {lp}", got.tokens, got.log_prob);
        wide += 1;

        let one = beam_search(&m, &cfg(1))?;
        let g: BeamHypothesis = greedy(&m, &cfg(1))?;
        let (rt, rl) = argmax_rollout(&m, max_len);
        ensure!(one == g, "seed {seed}: width 1 differs from greedy");
        ensure!(one.tokens == rt && one.log_prob == rl, "seed {seed}: width 1 differs from an argmax rollout");

        let mut prev = f64::NEG_INFINITY;
        for w in 1..=n {
            let h = beam_search(&m, &cfg(w))?;
            ensure!(h.log_prob >= prev, "seed {seed}: width {w} scored {} after {prev}", h.log_prob);
            prev = h.log_prob;
        }
    }
    Ok(format!("{wide} models: exhaustive match, width-1 = greedy, monotone in width"))
}

// ---- metrics ----

fn cap(t: &str) -> CaptionText {
    CaptionText::from_text(0, t)
}

fn words(t: &str) -> Vec<&str> {
    t.split_whitespace().collect()
}

fn grams<'a>(t: &'a str, n: usize) -> Vec<Vec<&'a str>> {
    let w = words(t);
    if w.len() < n {
        return vec![];
    }
    (0..=w.len() - n).map(|i| w[i..i + n].to_vec()).collect()
}

/// CIDEr-D from dense tf-idf vectors over every n-gram of the corpus.
fn cider_dense(cands: &[&str], refs: &[Vec<&str>]) -> Vec<f64> {
    let docs = refs.len() as f64;
    let mut out = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut space: BTreeSet<Vec<&str>> = BTreeSet::new();
        for s in cands.iter().chain(refs.iter().flatten()) {
            space.extend(grams(s, n));
        }
        let idf: Vec<f64> = space
            .iter()
            .map(|g| {
                let df = refs.iter().filter(|set| set.iter().any(|r| grams(r, n).contains(g))).count();
                docs.ln() - (df.max(1) as f64).ln()
            })
            .collect();
        let vector = |s: &str| -> Vec<f64> {
            let gs = grams(s, n);
            space.iter().zip(&idf).map(|(g, w)| gs.iter().filter(|x| *x == g).count() as f64 * w).collect()
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, c) in cands.iter().enumerate() {
            let cv = vector(c);
            let mut sum = 0.0;
            for r in &refs[i] {
                let rv = vector(r);
                let (nc, nr) = (norm(&cv), norm(&rv));
                if nc > 0.0 && nr > 0.0 {
                    let clipped: f64 = cv.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                    let delta = words(c).len() as f64 - words(r).len() as f64;
                    sum += clipped / (nc * nr) * (-delta * delta / (2.0 * 36.0)).exp();
                }
            }
            out[i] += sum / refs[i].len() as f64 / 4.0 * 10.0;
        }
    }
    out
}

fn counts(s: &str) -> BTreeMap<&str, usize> {
    let mut c = BTreeMap::new();
    for w in words(s) {
        *c.entry(w).or_default() += 1;
    }
    c
}

/// LCS by brute force over candidate subsequences (fine for short strings).
fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&str> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == w)) {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn metrics() -> Result<String> {
    let (m, t) = modified_precision(&[cap("the the the")], &[vec![cap("the cat")]], 1)?;
    let (cc, rc) = (counts("the the the"), counts("the cat"));
    let clipped: usize = cc.iter().map(|(w, k)| (*k).min(rc.get(w).copied().unwrap_or(0))).sum();
    let expected = clipped as f64 / cc.values().sum::<usize>() as f64;
    ensure!((m as f64 / t as f64 - expected).abs() < 1e-9 && (expected - 1.0 / 3.0).abs() < 1e-12, "clipped precision {m}/{t}");

    let (a, b) = (words("a b c d"), words("a c b d"));
    let l = lcs_brute(&a, &b) as f64;
    let (p, r) = (l / a.len() as f64, l / b.len() as f64);
    ensure!(p == 0.75 && r == 0.75, "brute-force LCS gave {l}");
    let f = (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p);
    let got = rouge_l(&[cap("a b c d")], &[vec![cap("a c b d")]])?;
    ensure!((got - f).abs() < 1e-9, "ROUGE-L {got} vs {f}");

    let cands = ["a red dog next to a blue ball", "there is a green tree", "a photo of a red dog"];
    let refs = vec![
        vec!["a red dog next to a blue ball", "we see a red dog near a blue ball"],
        vec!["a green tree", "there is a tall green tree", "the tree is green"],
        vec!["a photo of a brown dog", "a brown dog"],
    ];
    let expected = cider_dense(&cands, &refs);
    let c: Vec<CaptionText> = cands.iter().map(|s| cap(s)).collect();
    let r: Vec<Vec<CaptionText>> = refs.iter().map(|set| set.iter().map(|s| cap(s)).collect()).collect();
    let got = cider_per_sample(&c, &r)?;
    for (g, e) in got.iter().zip(&expected) {
        ensure!((g - e).abs() < 1e-9, "CIDEr {got:?} vs {expected:?}");
    }

    let perfect = [cap("a red dog"), cap("the tree is green"), cap("we see a blue bird and a red ball")];
    let same: Vec<_> = perfect.iter().map(|x| vec![x.clone()]).collect();
    let rep = evaluate_set(&perfect, &same)?;
    ensure!(rep.bleu1 == 1.0 && rep.bleu4 == 1.0 && rep.rouge_l == 1.0, "perfect match scored {rep:?}");
    Ok(format!("bleu clip 1/3, rouge-l f={f:.6}, cider {:.4}/{:.4}/{:.4}, perfect = 1", expected[0], expected[1], expected[2]))
}

// ---- input layout ----

pub fn layout(inputs: usize) -> Result<String> {
    let spec = WorldSpec::park();
    let bundle = build_dataset(&spec, SplitSizes { train: 1000, val: 1, test: 1 }, &mut substream(0, "data"))?;
    let vocab = Vocab::build(&bundle.text_corpus)?;
    let mut emb_rng = substream(0, "acceptance-layout");
    let mut rng = substream(0, "dropout");
    let mut with = 0usize;
    let mut identical = 0usize;
    for i in 0..inputs {
        let caption = &bundle.text_corpus[i % bundle.text_corpus.len()];
        let anchors = extract_nouns(caption, &spec);
        let f = Embedding::new((0..64).map(|_| emb_rng.random_range(-1.0..1.0)).collect());
        let x = build_training_input(&f, &anchors, &caption.tokens, 0.5, &mut rng, &vocab, 48)?;

        // the anchor region is the run of ids between the second and third slot [sep]
        let seps: Vec<usize> = x.slots.iter().enumerate().filter(|(_, s)| **s == Slot::Token(SEP)).map(|(i, _)| i).collect();
        ensure!(seps.len() == 2 && seps[0] == 2, "input {i}: separators at {seps:?}");
        let region: Vec<usize> = x.slots[3..seps[1]]
            .iter()
            .map(|s| match s {
                Slot::Token(t) => *t,
                Slot::Prefix => usize::MAX,
            })
            .collect();
        let full = vocab.encode(&anchors)?;
        ensure!(region.is_empty() || region == full, "input {i}: partial anchor set {region:?} of {full:?}");
        ensure!(x.anchors_present == !region.is_empty(), "input {i}: presence flag disagrees with slots");
        with += usize::from(!region.is_empty());

        // generation with the same embedding and anchors must lay out the same prefix
        let kept: Vec<String> = if region.is_empty() { vec![] } else { anchors.clone() };
        let g = build_generation_input(&f, &kept, &vocab);
        let head = seps[1] + 1;
        let bits = |e: &Embedding| e.values.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        ensure!(g.slots == x.slots[..head] && bits(&g.prefix) == bits(&x.prefix), "input {i}: prefixes differ");
        identical += 1;
    }
    let freq = with as f64 / inputs as f64;
    ensure!((freq - 0.5).abs() <= 0.02, "anchor presence {freq:.4} outside 0.5 +/- 0.02");
    Ok(format!("{inputs} inputs all-or-none, presence {freq:.4}, {identical} identical prefixes"))
}
