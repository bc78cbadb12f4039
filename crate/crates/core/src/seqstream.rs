//! Flat token streams: profile codes, then one segment per interacted item
//! (item codes, anchor, action), each token tagged with an (m, n) coordinate.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    ProfileCode,
    ItemCode,
    Anchor,
    Action,
}

impl TokenKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenKind::ProfileCode => "profile",
            TokenKind::ItemCode => "item",
            TokenKind::Anchor => "anchor",
            TokenKind::Action => "action",
        }
    }
}

/// `m` is the item order (0 for the profile), `n` the position inside the
/// segment starting at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub m: u32,
    pub n: u32,
}

impl Coord {
    pub fn new(m: u32, n: u32) -> Self {
        Coord { m, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticToken {
    pub vocab_id: u32,
    pub kind: TokenKind,
    pub coord: Coord,
}

/// Token id layout: padding 0, anchor 1, actions next, then one id range
/// per code position so equal codes at different layers stay distinct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    code_sizes: Vec<usize>,
    n_actions: usize,
}

pub const PAD_ID: u32 = 0;
pub const ANCHOR_ID: u32 = 1;
const ACTION_BASE: u32 = 2;

impl Vocab {
    pub fn new(code_sizes: Vec<usize>, n_actions: usize) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::config("vocabulary needs at least one action"));
        }
        if code_sizes.is_empty() || code_sizes.contains(&0) {
            return Err(Error::config("every code position needs a non-empty range"));
        }
        let total = ACTION_BASE as usize + n_actions + code_sizes.iter().sum::<usize>();
        if total > u32::MAX as usize {
            return Err(Error::config("vocabulary too large"));
        }
        Ok(Vocab { code_sizes, n_actions })
    }

    pub fn len(&self) -> usize {
        ACTION_BASE as usize + self.n_actions + self.code_sizes.iter().sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Codes per item (and per profile).
    pub fn code_len(&self) -> usize {
        self.code_sizes.len()
    }

    pub fn code_sizes(&self) -> &[usize] {
        &self.code_sizes
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn action_range(&self) -> Range<u32> {
        ACTION_BASE..ACTION_BASE + self.n_actions as u32
    }

    pub fn action_id(&self, action: usize) -> Result<u32> {
        if action >= self.n_actions {
            return Err(Error::invalid(format!("action {action} outside 0..{}", self.n_actions)));
        }
        Ok(ACTION_BASE + action as u32)
    }

    pub fn action_of(&self, id: u32) -> Option<usize> {
        self.action_range().contains(&id).then(|| (id - ACTION_BASE) as usize)
    }

    fn code_base(&self, position: usize) -> u32 {
        ACTION_BASE + self.n_actions as u32 + self.code_sizes[..position].iter().sum::<usize>() as u32
    }

    pub fn code_id(&self, position: usize, code: usize) -> Result<u32> {
        match self.code_sizes.get(position) {
            Some(&size) if code < size => Ok(self.code_base(position) + code as u32),
            Some(&size) => Err(Error::invalid(format!("code {code} at position {position} exceeds {size}"))),
            None => Err(Error::invalid(format!("code position {position} beyond {}", self.code_len()))),
        }
    }

    /// Inverse of [`Vocab::code_id`].
    pub fn code_of(&self, id: u32) -> Option<(usize, usize)> {
        let mut base = ACTION_BASE as usize + self.n_actions;
        let id = id as usize;
        for (p, &size) in self.code_sizes.iter().enumerate() {
            if id >= base && id < base + size {
                return Some((p, id - base));
            }
            base += size;
        }
        None
    }
}

/// One step of a user's history: the item's codes and the observed action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub codes: Vec<usize>,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<SemanticToken>,
    anchor_positions: Vec<usize>,
    action_positions: Vec<usize>,
    profile_len: usize,
}

/// Tokens of one item segment at order `m`: codes, anchor, and the action
/// when it is known. Candidates are scored from a segment without one.
pub fn segment_tokens(codes: &[usize], m: u32, action: Option<usize>, vocab: &Vocab) -> Result<Vec<SemanticToken>> {
    if codes.is_empty() {
        return Err(Error::invalid("item has no codes"));
    }
    if codes.len() != vocab.code_len() {
        return Err(Error::invalid(format!(
            "item has {} codes, vocabulary expects {}",
            codes.len(),
            vocab.code_len()
        )));
    }
    let mut out = Vec::with_capacity(codes.len() + 2);
    for (p, &c) in codes.iter().enumerate() {
        out.push(SemanticToken {
            vocab_id: vocab.code_id(p, c)?,
            kind: TokenKind::ItemCode,
            coord: Coord::new(m, p as u32 + 1),
        });
    }
    let n = codes.len() as u32;
    out.push(SemanticToken {
        vocab_id: ANCHOR_ID,
        kind: TokenKind::Anchor,
        coord: Coord::new(m, n + 1),
    });
    if let Some(a) = action {
        out.push(SemanticToken {
            vocab_id: vocab.action_id(a)?,
            kind: TokenKind::Action,
            coord: Coord::new(m, n + 2),
        });
    }
    Ok(out)
}

pub fn profile_tokens(codes: &[usize], vocab: &Vocab) -> Result<Vec<SemanticToken>> {
    if !codes.is_empty() && codes.len() != vocab.code_len() {
        return Err(Error::invalid(format!(
            "profile has {} codes, vocabulary expects {}",
            codes.len(),
            vocab.code_len()
        )));
    }
    codes
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            Ok(SemanticToken {
                vocab_id: vocab.code_id(p, c)?,
                kind: TokenKind::ProfileCode,
                coord: Coord::new(0, p as u32 + 1),
            })
        })
        .collect()
}

pub fn build_stream(profile: &[usize], history: &[Interaction], vocab: &Vocab) -> Result<TokenStream> {
    let mut tokens = profile_tokens(profile, vocab)?;
    for (t, it) in history.iter().enumerate() {
        tokens.extend(segment_tokens(&it.codes, t as u32 + 1, Some(it.action), vocab)?);
    }
    Ok(TokenStream::from_parts(tokens, profile.len()))
}

impl TokenStream {
    fn from_parts(tokens: Vec<SemanticToken>, profile_len: usize) -> Self {
        let pos = |k: TokenKind| tokens.iter().enumerate().filter(|(_, t)| t.kind == k).map(|(i, _)| i).collect();
        TokenStream {
            anchor_positions: pos(TokenKind::Anchor),
            action_positions: pos(TokenKind::Action),
            tokens,
            profile_len,
        }
    }

    pub fn tokens(&self) -> &[SemanticToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn anchor_positions(&self) -> &[usize] {
        &self.anchor_positions
    }

    pub fn action_positions(&self) -> &[usize] {
        &self.action_positions
    }

    pub fn profile_len(&self) -> usize {
        self.profile_len
    }

    pub fn item_count(&self) -> usize {
        self.anchor_positions.len()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.vocab_id).collect()
    }

    pub fn coords(&self) -> Vec<Coord> {
        self.tokens.iter().map(|t| t.coord).collect()
    }

    /// Token range of item `t` (1-based, as in the coordinates).
    pub fn segment(&self, t: usize) -> Range<usize> {
        assert!(t >= 1 && t <= self.item_count(), "segment {t} out of range");
        let start = if t == 1 {
            self.profile_len
        } else {
            self.action_positions[t - 2] + 1
        };
        start..self.action_positions[t - 1] + 1
    }

    /// Keeps the profile and the `k` most recent items, renumbering `m`.
    pub fn truncate(&self, k: usize) -> TokenStream {
        let items = self.item_count();
        if k >= items {
            return self.clone();
        }
        let mut tokens = self.tokens[..self.profile_len].to_vec();
        if k > 0 {
            let drop = (items - k) as u32;
            let start = self.segment(items - k + 1).start;
            tokens.extend(self.tokens[start..].iter().map(|t| SemanticToken {
                coord: Coord::new(t.coord.m - drop, t.coord.n),
                ..*t
            }));
        }
        TokenStream::from_parts(tokens, self.profile_len)
    }

    /// Recovers the profile codes and the interaction history.
    pub fn reconstruct(&self, vocab: &Vocab) -> Result<(Vec<usize>, Vec<Interaction>)> {
        let code = |t: &SemanticToken| {
            vocab
                .code_of(t.vocab_id)
                .map(|(_, c)| c)
                .ok_or_else(|| Error::invalid(format!("token {} is not a code", t.vocab_id)))
        };
        let profile = self.tokens[..self.profile_len].iter().map(code).collect::<Result<_>>()?;
        let mut history = Vec::with_capacity(self.item_count());
        for t in 1..=self.item_count() {
            let seg = &self.tokens[self.segment(t)];
            let (action, rest) = seg.split_last().expect("segment ends with its action");
            let codes = rest[..rest.len() - 1].iter().map(code).collect::<Result<_>>()?;
            let action = vocab
                .action_of(action.vocab_id)
                .ok_or_else(|| Error::invalid(format!("token {} is not an action", action.vocab_id)))?;
            history.push(Interaction { codes, action });
        }
        Ok((profile, history))
    }

    /// One token per line: `idx kind vocab_id m n`.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {} {}", t.kind.name(), t.vocab_id, t.coord.m, t.coord.n);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(vec![4, 4, 4, 3, 3, 3], 2).unwrap()
    }

    fn item(c: usize, a: usize) -> Interaction {
        Interaction {
            codes: vec![c % 4, (c + 1) % 4, (c + 2) % 4, c % 3, 0, 1],
            action: a,
        }
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let v = vocab();
        assert_eq!(v.len(), 2 + 2 + 21);
        let mut seen = std::collections::HashSet::new();
        assert!(seen.insert(PAD_ID) && seen.insert(ANCHOR_ID));
        for a in 0..2 {
            assert!(seen.insert(v.action_id(a).unwrap()));
        }
        for (p, &size) in v.code_sizes().iter().enumerate() {
            for c in 0..size {
                let id = v.code_id(p, c).unwrap();
                assert!(seen.insert(id));
                assert_eq!(v.code_of(id), Some((p, c)));
            }
        }
        assert_eq!(seen.len(), v.len());
        assert!(v.code_id(0, 4).is_err() && v.code_id(6, 0).is_err());
    }

    #[test]
    fn two_item_layout() {
        let s = build_stream(&[0, 1, 2, 0, 1, 2], &[item(0, 1), item(1, 0)], &vocab()).unwrap();
        assert_eq!(s.len(), 22);
        assert_eq!(s.anchor_positions(), &[12, 20]);
        assert_eq!(s.action_positions(), &[13, 21]);
        assert_eq!(s.tokens()[12].coord, Coord::new(1, 7));
        assert_eq!(s.tokens()[13].coord, Coord::new(1, 8));
        assert_eq!(s.tokens()[14].coord, Coord::new(2, 1));
        assert_eq!(s.segment(2), 14..22);
    }

    #[test]
    fn profile_only_and_errors() {
        let s = build_stream(&[0, 0, 0, 0, 0, 0], &[], &vocab()).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.anchor_positions().is_empty());
        let empty = Interaction { codes: vec![], action: 0 };
        assert!(build_stream(&[], &[empty], &vocab()).is_err());
        assert!(build_stream(&[], &[item(0, 2)], &vocab()).is_err());
    }

    #[test]
    fn truncate_keeps_recent_items() {
        let s = build_stream(&[1, 1, 1, 1, 1, 1], &[item(0, 0), item(1, 1), item(2, 0)], &vocab()).unwrap();
        assert_eq!(s.truncate(3), s);
        assert_eq!(s.truncate(7), s);
        let p = s.truncate(0);
        assert_eq!(p.len(), 6);
        let one = s.truncate(1);
        assert_eq!(one.len(), 14);
        assert!(one.tokens()[6..].iter().all(|t| t.coord.m == 1));
        let (_, hist) = one.reconstruct(&vocab()).unwrap();
        assert_eq!(hist, vec![item(2, 0)]);
    }

    #[test]
    fn dump_format() {
        let s = build_stream(&[], &[item(0, 1)], &vocab()).unwrap();
        let dump = s.debug_dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "0 item 4 1 1");
        assert_eq!(lines[6], "6 anchor 1 1 7");
        assert_eq!(lines[7], "7 action 3 1 8");
    }

    fn history() -> impl Strategy<Value = (Vec<usize>, Vec<Interaction>)> {
        let codes = || proptest::collection::vec(0usize..3, 6);
        (
            prop_oneof![Just(vec![]), codes()],
            proptest::collection::vec((codes(), 0usize..2).prop_map(|(codes, action)| Interaction { codes, action }), 0..12),
        )
    }

    proptest! {
        #[test]
        fn layout_invariants_hold((profile, hist) in history(), k in 0usize..14) {
            let v = vocab();
            let full = build_stream(&profile, &hist, &v).unwrap();
            for s in [full.clone(), full.truncate(k)] {
                prop_assert_eq!(s.anchor_positions().len(), s.item_count());
                prop_assert_eq!(s.action_positions().len(), s.item_count());
                let mut prev: Option<Coord> = None;
                for (i, t) in s.tokens().iter().enumerate() {
                    if t.kind == TokenKind::ProfileCode {
                        prop_assert_eq!(t.coord, Coord::new(0, i as u32 + 1));
                    } else {
                        let p = prev.unwrap_or(Coord::new(0, 0));
                        let fresh = t.coord.n == 1 && t.coord.m == p.m + 1;
                        let next = t.coord.m == p.m && t.coord.n == p.n + 1 && p.m > 0;
                        prop_assert!(fresh || next, "bad coord {:?} after {:?}", t.coord, p);
                    }
                    match t.kind {
                        TokenKind::Anchor => prop_assert_eq!(t.coord.n, 7),
                        TokenKind::Action => prop_assert_eq!(t.coord.n, 8),
                        TokenKind::ItemCode => prop_assert!(t.coord.n <= 6),
                        TokenKind::ProfileCode => {}
                    }
                    prev = Some(t.coord);
                }
            }
            let (p2, h2) = full.reconstruct(&v).unwrap();
            prop_assert_eq!(&p2, &profile);
            prop_assert_eq!(&h2, &hist);
            let (_, tail) = full.truncate(k).reconstruct(&v).unwrap();
            prop_assert_eq!(&tail[..], &hist[hist.len().saturating_sub(k)..]);
        }
    }
}
