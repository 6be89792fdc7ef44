//! Sequence layout and attention visibility for interleaved physical
//! tokens.
//!
//! One episode becomes one sequence: a text prefix, then per step `n` a
//! block of `k_obs` frame tokens for observation `O_n` followed by `k_act`
//! action tokens for chunk `A_n`. The pairing is by outcome: `A_n` is the
//! chunk whose execution produced `O_n`, so within a step the frame comes
//! first and the chunk that explains it second (step 0 carries a
//! beginning-of-actions marker instead of a real chunk).
//!
//! Visibility rules, applied in this order of precedence:
//! - text tokens attend only to text, bidirectionally;
//! - every non-text token attends to all text;
//! - frame tokens attend to their own frame bidirectionally and to
//!   strictly earlier frames and chunks, never to their own step's chunk
//!   (the frame is sampled before the chunk that explains it);
//! - action tokens attend to frames up to and including their own step
//!   (the imagined outcome is visible while the chunk is generated) and
//!   to earlier slots of their own chunk, causally.
//!
//! A prefix length `s` is a cache boundary when no token before `s` may
//! attend at or beyond `s`; only at such boundaries can a KV cache grow
//! by appending without invalidating stored activations. Boundaries sit
//! after the text block, after each frame block, and after every single
//! action token, and nowhere else (frame blocks and the text block are
//! internally bidirectional, so splitting them is unsound).
//!
//! The two denoising heads read backbone outputs at fixed rows:
//!
//! ```text
//!   [t t t][f f f f f f][a a a][f f f f f f][a a a] ...
//!    text   frame 0      chunk0 frame 1      chunk1
//!               |____________|       |___|
//!            last k_obs outputs    last k_act outputs
//!            BEFORE frame 1's      INSIDE frame 1's
//!            block condition the   block condition the
//!            frame head for O_1    chunk head for A_1
//! ```
//!
//! The frame head for step `n` sees only rows that precede the frame it
//! predicts (tail of frame `n-1` plus all of chunk `n-1`), matching what
//! a cache holds right before the frame is generated. The chunk head for
//! step `n` reads the processed features of frame `n` itself: the chunk
//! is inferred from the outcome it must produce.

use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Frame { step: usize },
    Action { step: usize, slot: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub k_text: usize,
    pub k_obs: usize,
    pub k_act: usize,
    pub n_steps: usize,
}

impl SeqLayout {
    pub fn new(k_text: usize, k_obs: usize, k_act: usize, n_steps: usize) -> Self {
        assert!(k_text > 0 && k_obs > 0 && k_act > 0, "all block sizes must be positive");
        SeqLayout { k_text, k_obs, k_act, n_steps }
    }

    fn block(&self) -> usize {
        self.k_obs + self.k_act
    }

    pub fn total(&self) -> usize {
        self.k_text + self.n_steps * self.block()
    }

    pub fn step_start(&self, n: usize) -> usize {
        assert!(n < self.n_steps, "step {n} outside 0..{}", self.n_steps);
        self.k_text + n * self.block()
    }

    pub fn frame_range(&self, n: usize) -> std::ops::Range<usize> {
        let s = self.step_start(n);
        s..s + self.k_obs
    }

    pub fn action_range(&self, n: usize) -> std::ops::Range<usize> {
        let s = self.step_start(n) + self.k_obs;
        s..s + self.k_act
    }

    pub fn kind(&self, pos: usize) -> TokenKind {
        assert!(pos < self.total(), "position {pos} outside sequence of {}", self.total());
        if pos < self.k_text {
            return TokenKind::Text;
        }
        let rel = pos - self.k_text;
        let step = rel / self.block();
        let within = rel % self.block();
        if within < self.k_obs {
            TokenKind::Frame { step }
        } else {
            TokenKind::Action { step, slot: within - self.k_obs }
        }
    }

    /// May the query at `q` attend to the key at `k`?
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        use TokenKind::*;
        match (self.kind(q), self.kind(k)) {
            (Text, Text) => true,
            (Text, _) => false,
            (_, Text) => true,
            (Frame { step: n }, Frame { step: m }) => m <= n,
            (Frame { step: n }, Action { step: m, .. }) => m < n,
            (Action { step: n, .. }, Frame { step: m }) => m <= n,
            (Action { step: n, slot: l }, Action { step: m, slot: j }) => {
                m < n || (m == n && j <= l)
            }
        }
    }

    /// Additive attention mask: 0 where attention is allowed, the softmax
    /// mask floor where blocked. Shape (total, total).
    pub fn build_mask(&self) -> Tensor {
        let s = self.total();
        let mut data = vec![0.0f32; s * s];
        for q in 0..s {
            for k in 0..s {
                if !self.allowed(q, k) {
                    data[q * s + k] = kernels::MASKED_ROW_FLOOR;
                }
            }
        }
        Tensor::new(&[s, s], data)
    }

    /// Scalar rotary time for each position: text sits at 0, the frame of
    /// step `n` at `n`, and action slot `l` of step `n` at fractional
    /// offsets strictly between its own frame and the next.
    pub fn rope_positions(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total());
        for pos in 0..self.total() {
            out.push(match self.kind(pos) {
                TokenKind::Text => 0.0,
                TokenKind::Frame { step } => step as f32,
                TokenKind::Action { step, slot } => {
                    step as f32 + (slot + 1) as f32 / (self.k_act + 1) as f32
                }
            });
        }
        out
    }

    /// Prefix lengths at which a KV cache may stop and later grow by
    /// appending. Includes 0 and the full length.
    pub fn cache_boundaries(&self) -> Vec<usize> {
        let mut out = vec![0, self.k_text];
        for n in 0..self.n_steps {
            let fs = self.step_start(n);
            out.push(fs + self.k_obs);
            for j in 1..=self.k_act {
                out.push(fs + self.k_obs + j);
            }
        }
        out
    }

    pub fn is_cache_boundary(&self, s: usize) -> bool {
        self.cache_boundaries().contains(&s)
    }

    /// Backbone rows conditioning the frame head for step `n`: the last
    /// `k_obs` positions strictly before frame `n`'s block. Step 0 is
    /// given, never predicted, so `n` starts at 1.
    pub fn frame_condition_rows(&self, n: usize) -> std::ops::Range<usize> {
        assert!(n >= 1 && n < self.n_steps, "frame {n} is not predictable");
        let start = self.frame_range(n).start;
        start - self.k_obs..start
    }

    /// Backbone rows conditioning the chunk head for step `n`: the last
    /// `k_act` positions of frame `n`'s own block.
    pub fn chunk_condition_rows(&self, n: usize) -> std::ops::Range<usize> {
        assert!(self.k_act <= self.k_obs, "chunk conditioning needs k_act <= k_obs");
        let r = self.frame_range(n);
        r.end - self.k_act..r.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent visibility decision, written directly from the rule
    /// list with no shared code: classify both positions from scratch and
    /// match the rules one by one.
    fn oracle_allowed(
        k_text: usize,
        k_obs: usize,
        k_act: usize,
        q: usize,
        k: usize,
    ) -> bool {
        #[derive(PartialEq)]
        enum C {
            Text,
            Frame(usize),
            Act(usize, usize),
        }
        let classify = |p: usize| -> C {
            if p < k_text {
                return C::Text;
            }
            let mut rest = p - k_text;
            let mut step = 0;
            loop {
                if rest < k_obs {
                    return C::Frame(step);
                }
                rest -= k_obs;
                if rest < k_act {
                    return C::Act(step, rest);
                }
                rest -= k_act;
                step += 1;
            }
        };
        let (cq, ck) = (classify(q), classify(k));
        // Rule: text attends to text only.
        if let C::Text = cq {
            return matches!(ck, C::Text);
        }
        // Rule: everything non-text sees all text.
        if let C::Text = ck {
            return true;
        }
        match (cq, ck) {
            // Rule: frames see frames of the same or earlier steps.
            (C::Frame(n), C::Frame(m)) => m <= n,
            // Rule: frames see strictly earlier chunks only.
            (C::Frame(n), C::Act(m, _)) => m < n,
            // Rule: chunks see frames up to and including their own step.
            (C::Act(n, _), C::Frame(m)) => m <= n,
            // Rule: chunks see earlier chunks whole, their own causally.
            (C::Act(n, l), C::Act(m, j)) => m < n || (m == n && j <= l),
            _ => unreachable!(),
        }
    }

    #[test]
    fn mask_matches_rule_enumeration_on_reference_shapes() {
        for (k_text, k_obs, k_act, n_steps) in
            [(3, 16, 4, 3), (3, 16, 4, 1), (2, 3, 2, 4), (1, 1, 1, 5), (3, 16, 4, 0)]
        {
            let l = SeqLayout::new(k_text, k_obs, k_act, n_steps);
            let mask = l.build_mask();
            let s = l.total();
            for q in 0..s {
                for k in 0..s {
                    let want = oracle_allowed(k_text, k_obs, k_act, q, k);
                    assert_eq!(
                        l.allowed(q, k),
                        want,
                        "allowed({q},{k}) in layout {l:?}"
                    );
                    let cell = mask.data[q * s + k];
                    assert_eq!(
                        cell,
                        if want { 0.0 } else { kernels::MASKED_ROW_FLOOR },
                        "mask[{q},{k}] in layout {l:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn hand_picked_pairs_behave_as_specified() {
        // Layout (3,4,2,2): text 0..3, F0 3..7, A0 7..9, F1 9..13, A1 13..15.
        let l = SeqLayout::new(3, 4, 2, 2);
        assert_eq!(l.total(), 15);
        assert!(l.allowed(4, 6), "frame token must see a later column of its own frame");
        assert!(!l.allowed(4, 7), "frame must not see its own step's chunk");
        assert!(l.allowed(7, 4), "chunk must see its own step's frame");
        assert!(!l.allowed(7, 8), "chunk slot 0 must not see slot 1");
        assert!(l.allowed(8, 7), "chunk slot 1 must see slot 0");
        assert!(l.allowed(9, 7), "later frame must see earlier chunk");
        assert!(!l.allowed(0, 4), "text must not see frames");
        assert!(l.allowed(4, 0), "frames must see text");
        assert!(l.allowed(13, 12), "chunk must see the frame it explains");
        assert!(!l.allowed(4, 9), "frame must not see a future frame");
        assert!(l.allowed(14, 8), "chunk must see all earlier chunks' slots");
    }

    #[test]
    fn every_query_attends_somewhere() {
        let l = SeqLayout::new(3, 16, 4, 8);
        for q in 0..l.total() {
            assert!((0..l.total()).any(|k| l.allowed(q, k)), "query {q} fully masked");
            assert!(l.allowed(q, q), "query {q} cannot see itself");
        }
    }

    #[test]
    fn kind_and_ranges_agree() {
        let l = SeqLayout::new(3, 16, 4, 3);
        for n in 0..3 {
            for p in l.frame_range(n) {
                assert_eq!(l.kind(p), TokenKind::Frame { step: n });
            }
            for (slot, p) in l.action_range(n).enumerate() {
                assert_eq!(l.kind(p), TokenKind::Action { step: n, slot });
            }
        }
        assert_eq!(l.kind(0), TokenKind::Text);
        assert_eq!(l.frame_range(0).start, 3);
        assert_eq!(l.action_range(2).end, l.total());
    }

    #[test]
    fn rope_positions_interleave_frames_and_chunks() {
        let l = SeqLayout::new(3, 2, 4, 2);
        let p = l.rope_positions();
        assert_eq!(&p[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&p[3..5], &[0.0, 0.0]);
        assert_eq!(&p[5..9], &[0.2, 0.4, 0.6, 0.8]);
        assert_eq!(&p[9..11], &[1.0, 1.0]);
        assert_eq!(&p[11..15], &[1.2, 1.4, 1.6, 1.8]);
        assert!(p.windows(2).all(|w| w[0] <= w[1]), "time must be non-decreasing");
    }

    #[test]
    fn condition_rows_sit_where_the_heads_expect() {
        // Layout (3,4,2,2): text 0..3, F0 3..7, A0 7..9, F1 9..13, A1 13..15.
        let l = SeqLayout::new(3, 4, 2, 2);
        // Frame head for step 1 reads the 4 rows before F1: tail of F0
        // plus the whole chunk 0.
        assert_eq!(l.frame_condition_rows(1), 5..9);
        // Chunk heads read the tail of their own frame block.
        assert_eq!(l.chunk_condition_rows(0), 5..7);
        assert_eq!(l.chunk_condition_rows(1), 11..13);

        let big = SeqLayout::new(3, 16, 4, 8);
        for n in 1..8 {
            let fr = big.frame_range(n);
            for q in big.frame_condition_rows(n) {
                assert!(q < fr.start, "frame conditioning must precede the frame");
            }
            for q in big.chunk_condition_rows(n) {
                assert!(fr.contains(&q), "chunk conditioning must lie inside its frame");
            }
            assert_eq!(big.frame_condition_rows(n).len(), big.k_obs);
            assert_eq!(big.chunk_condition_rows(n).len(), big.k_act);
        }
    }

    #[test]
    fn cache_boundaries_enumerate_correctly_on_reference_layout() {
        let l = SeqLayout::new(3, 4, 2, 2);
        let mut want = vec![0, 3, 7, 8, 9, 13, 14, 15];
        want.dedup();
        assert_eq!(l.cache_boundaries(), want);
        assert!(l.is_cache_boundary(l.total()));
        assert!(!l.is_cache_boundary(5), "mid-frame split must be rejected");
        assert!(!l.is_cache_boundary(1), "mid-text split must be rejected");
    }

    proptest! {
        /// A prefix length is a cache boundary exactly when no token in
        /// the prefix may attend outside it. The closed-form boundary
        /// list must agree with that mask-derived definition everywhere.
        #[test]
        fn cache_boundaries_match_mask_reachability(
            k_text in 1usize..4,
            k_obs in 1usize..6,
            k_act in 1usize..5,
            n_steps in 0usize..4,
        ) {
            let l = SeqLayout::new(k_text, k_obs, k_act, n_steps);
            for s in 0..=l.total() {
                let self_contained = (0..s).all(|q| (s..l.total()).all(|k| !l.allowed(q, k)));
                prop_assert_eq!(
                    l.is_cache_boundary(s),
                    self_contained,
                    "split {} in layout {:?}", s, l
                );
            }
        }

        /// Visibility must agree with the independent rule enumeration on
        /// arbitrary layouts, not just the reference shapes.
        #[test]
        fn allowed_matches_oracle_on_random_layouts(
            k_text in 1usize..4,
            k_obs in 1usize..6,
            k_act in 1usize..5,
            n_steps in 0usize..4,
        ) {
            let l = SeqLayout::new(k_text, k_obs, k_act, n_steps);
            for q in 0..l.total() {
                for k in 0..l.total() {
                    prop_assert_eq!(
                        l.allowed(q, k),
                        oracle_allowed(k_text, k_obs, k_act, q, k)
                    );
                }
            }
        }
    }
}
