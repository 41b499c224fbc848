//! Flip-flop strings, the flip-flop automaton and its monoid, and the
//! canonical `FFL(T, p)` sampler.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Pcg32};

/// Largest supported data vocabulary: data symbols are single ASCII digits.
pub const MAX_VOCAB: u8 = 10;
/// Number of instruction tokens (`w`, `r`, `i`).
pub const NUM_INSTRUCTIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FflError {
    #[error("invalid token character {ch:?} at position {position}")]
    BadChar { ch: char, position: usize },
    #[error("token sequence is not a structurally valid flip-flop string")]
    Structure,
    #[error("prefix has no write instruction before its final read")]
    NoPriorWrite,
    #[error("prefix must end in a read instruction")]
    NotRead,
    #[error("invalid parameters: {0}")]
    Params(String),
}

/// One symbol of a flip-flop string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Write,
    Read,
    Ignore,
    Data(u8),
}

impl Token {
    pub fn to_char(self) -> char {
        match self {
            Token::Write => 'w',
            Token::Read => 'r',
            Token::Ignore => 'i',
            Token::Data(v) => char::from(b'0' + v),
        }
    }

    pub fn from_char(c: char) -> Option<Token> {
        match c {
            'w' => Some(Token::Write),
            'r' => Some(Token::Read),
            'i' => Some(Token::Ignore),
            '0'..='9' => Some(Token::Data(c as u8 - b'0')),
            _ => None,
        }
    }

    /// Model vocabulary index: `w -> 0`, `r -> 1`, `i -> 2`, digit `d -> 3 + d`.
    pub fn index(self) -> usize {
        match self {
            Token::Write => 0,
            Token::Read => 1,
            Token::Ignore => 2,
            Token::Data(v) => NUM_INSTRUCTIONS + v as usize,
        }
    }

    pub fn from_index(index: usize) -> Option<Token> {
        match index {
            0 => Some(Token::Write),
            1 => Some(Token::Read),
            2 => Some(Token::Ignore),
            i if i < NUM_INSTRUCTIONS + MAX_VOCAB as usize => {
                Some(Token::Data((i - NUM_INSTRUCTIONS) as u8))
            }
            _ => None,
        }
    }

    pub fn is_instruction(self) -> bool {
        !matches!(self, Token::Data(_))
    }
}

/// Size of the model vocabulary for `m` data symbols.
pub fn vocab_size(m: u8) -> usize {
    NUM_INSTRUCTIONS + m as usize
}

pub fn parse_tokens(s: &str) -> Result<Vec<Token>, FflError> {
    s.chars()
        .enumerate()
        .map(|(i, ch)| Token::from_char(ch).ok_or(FflError::BadChar { ch, position: i + 1 }))
        .collect()
}

pub fn tokens_to_string(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_char()).collect()
}

/// Structural check: even length >= 4, instruction/data alternation, first
/// instruction `w`, last instruction `r`.
pub fn validate_structure(tokens: &[Token]) -> bool {
    let n = tokens.len();
    if n < 4 || n % 2 != 0 {
        return false;
    }
    let alternates = tokens
        .iter()
        .enumerate()
        .all(|(i, t)| t.is_instruction() == (i % 2 == 0));
    alternates && tokens[0] == Token::Write && tokens[n - 2] == Token::Read
}

/// Outcome of [`validate_reads`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadValidity {
    Valid,
    /// 1-indexed position of the first data token that disagrees with memory.
    Violation { position: usize },
}

pub fn validate_reads(tokens: &[Token]) -> Result<ReadValidity, FflError> {
    if !validate_structure(tokens) {
        return Err(FflError::Structure);
    }
    let mut memory = None;
    for (k, pair) in tokens.chunks_exact(2).enumerate() {
        let Token::Data(v) = pair[1] else {
            return Err(FflError::Structure);
        };
        match pair[0] {
            Token::Write => memory = Some(v),
            Token::Read if memory != Some(v) => {
                return Ok(ReadValidity::Violation { position: 2 * k + 2 });
            }
            _ => {}
        }
    }
    Ok(ReadValidity::Valid)
}

/// The deterministic answer for a prefix ending in `r`: the data symbol that
/// follows the most recent `w`.
pub fn oracle_read(prefix: &[Token]) -> Result<u8, FflError> {
    if prefix.last() != Some(&Token::Read) {
        return Err(FflError::NotRead);
    }
    let body = &prefix[..prefix.len() - 1];
    let pos = body
        .iter()
        .enumerate()
        .rev()
        .find(|(i, t)| i % 2 == 0 && **t == Token::Write)
        .map(|(i, _)| i)
        .ok_or(FflError::NoPriorWrite)?;
    match body.get(pos + 1) {
        Some(Token::Data(v)) => Ok(*v),
        _ => Err(FflError::Structure),
    }
}

/// Input symbol of the flip-flop automaton, identified with its state
/// transformation: `Set(b)` is σ_b, `Hold` is ⊥.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sigma {
    Set(u8),
    Hold,
}

/// Element of the flip-flop transformation monoid.
pub type MonoidElement = Sigma;

impl Sigma {
    /// The binary monoid `{σ0, σ1, ⊥}`.
    pub const BINARY: [Sigma; 3] = [Sigma::Set(0), Sigma::Set(1), Sigma::Hold];

    pub fn apply(self, q: u8) -> u8 {
        match self {
            Sigma::Set(b) => b,
            Sigma::Hold => q,
        }
    }
}

/// `f ∘ g` (apply `g`, then `f`): `σ_b ∘ g = σ_b`, `⊥ ∘ g = g`.
pub fn monoid_compose(f: MonoidElement, g: MonoidElement) -> MonoidElement {
    match f {
        Sigma::Set(_) => f,
        Sigma::Hold => g,
    }
}

/// Two-state (or `M`-state) memory cell driven by [`Sigma`] inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipFlopAutomaton {
    pub state: u8,
}

impl FlipFlopAutomaton {
    pub fn new(q0: u8) -> Self {
        Self { state: q0 }
    }

    pub fn transition(q: u8, input: Sigma) -> u8 {
        input.apply(q)
    }

    pub fn step(&mut self, input: Sigma) -> u8 {
        self.state = Self::transition(self.state, input);
        self.state
    }
}

/// States after each input, starting from `q0`.
pub fn simulate(inputs: &[Sigma], q0: u8) -> Vec<u8> {
    let mut automaton = FlipFlopAutomaton::new(q0);
    inputs.iter().map(|&s| automaton.step(s)).collect()
}

/// Maps each instruction/data pair to an automaton input: `(w, b) -> σ_b`,
/// reads and ignores to `⊥`. Trailing unpaired tokens are rejected.
pub fn to_sigma_sequence(tokens: &[Token]) -> Result<Vec<Sigma>, FflError> {
    if !validate_structure(tokens) {
        return Err(FflError::Structure);
    }
    Ok(pairs_to_sigma(tokens))
}

pub(crate) fn pairs_to_sigma(tokens: &[Token]) -> Vec<Sigma> {
    tokens
        .chunks_exact(2)
        .map(|pair| match (pair[0], pair[1]) {
            (Token::Write, Token::Data(b)) => Sigma::Set(b),
            _ => Sigma::Hold,
        })
        .collect()
}

/// A structurally valid flip-flop string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FflString(Vec<Token>);

impl FflString {
    pub fn new(tokens: Vec<Token>) -> Result<Self, FflError> {
        if validate_structure(&tokens) {
            Ok(Self(tokens))
        } else {
            Err(FflError::Structure)
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index()).collect()
    }

    pub fn validate_reads(&self) -> ReadValidity {
        validate_reads(&self.0).expect("FflString is structurally valid")
    }

    /// 0-indexed positions holding a `r` instruction.
    pub fn read_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Token::Read)
            .map(|(i, _)| i)
    }

    pub fn count_reads(&self) -> usize {
        self.read_positions().count()
    }

    pub fn max_data_symbol(&self) -> Option<u8> {
        self.0
            .iter()
            .filter_map(|t| match t {
                Token::Data(v) => Some(*v),
                _ => None,
            })
            .max()
    }
}

impl fmt::Display for FflString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&tokens_to_string(&self.0))
    }
}

impl FromStr for FflString {
    type Err = FflError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FflString::new(parse_tokens(s)?)
    }
}

/// Parameters of the canonical flip-flop language distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FflParams {
    pub length: usize,
    pub p_write: f64,
    pub p_read: f64,
    pub p_ignore: f64,
    pub vocab: u8,
}

const PROB_TOL: f64 = 1e-9;

impl FflParams {
    pub fn new(length: usize, p_write: f64, p_read: f64, vocab: u8) -> Result<Self, FflError> {
        let params = Self {
            length,
            p_write,
            p_read,
            p_ignore: 1.0 - p_write - p_read,
            vocab,
        };
        params.validate()?;
        Ok(params)
    }

    /// `FFL(p_i)`: `T = 512`, `p_w = p_r = (1 - p_i) / 2`, binary data.
    pub fn ffl(p_ignore: f64) -> Self {
        Self::ffl_with_length(p_ignore, 512)
    }

    pub fn ffl_with_length(p_ignore: f64, length: usize) -> Self {
        let half = (1.0 - p_ignore) / 2.0;
        Self {
            length,
            p_write: half,
            p_read: half,
            p_ignore,
            vocab: 2,
        }
    }

    pub fn with_vocab(mut self, vocab: u8) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn validate(&self) -> Result<(), FflError> {
        let bad = |msg: String| Err(FflError::Params(msg));
        if self.length < 4 || self.length % 2 != 0 {
            return bad(format!("length must be even and >= 4, got {}", self.length));
        }
        if !(2..=MAX_VOCAB).contains(&self.vocab) {
            return bad(format!("vocab must be in [2, {MAX_VOCAB}], got {}", self.vocab));
        }
        for (name, p) in [("p_w", self.p_write), ("p_r", self.p_read), ("p_i", self.p_ignore)] {
            if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) || !p.is_finite() {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        let total = self.p_write + self.p_read + self.p_ignore;
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("probabilities sum to {total}"));
        }
        Ok(())
    }

    /// Expected number of reads per sequence (one forced read plus the
    /// stochastic middle instructions).
    pub fn expected_reads(&self) -> f64 {
        1.0 + (self.length / 2 - 2) as f64 * self.p_read
    }
}

/// Draws an instruction for an interior pair from one `u32` output.
pub(crate) fn draw_instruction<R: Rng + ?Sized>(params: &FflParams, rng: &mut R) -> Token {
    let u = rng::unit_f64(rng);
    if u < params.p_write {
        Token::Write
    } else if u < params.p_write + params.p_read {
        Token::Read
    } else {
        Token::Ignore
    }
}

/// Samples one string with an already positioned generator.
///
/// Pairs are visited left to right; for each pair the instruction is drawn
/// first (interior pairs only), then the data symbol (after `w` or `i` only).
pub fn sample_with_rng(params: &FflParams, rng: &mut Pcg32) -> FflString {
    let pairs = params.length / 2;
    let mut tokens = Vec::with_capacity(params.length);
    let mut memory = 0u8;
    for k in 0..pairs {
        let instr = if k == 0 {
            Token::Write
        } else if k == pairs - 1 {
            Token::Read
        } else {
            draw_instruction(params, rng)
        };
        let data = match instr {
            Token::Read => memory,
            _ => rng::below(rng, u32::from(params.vocab)) as u8,
        };
        if instr == Token::Write {
            memory = data;
        }
        tokens.push(instr);
        tokens.push(Token::Data(data));
    }
    FflString(tokens)
}

/// Samples one string; a pure function of `(params, seed)`.
pub fn sample(params: &FflParams, seed: u64) -> FflString {
    let mut rng = rng::pcg(seed);
    sample_with_rng(params, &mut rng)
}

/// Every valid string of exactly `length` tokens over `vocab` data symbols,
/// in lexicographic order of pair choices.
pub fn enumerate_valid(length: usize, vocab: u8) -> Vec<FflString> {
    if length < 4 || length % 2 != 0 || vocab == 0 {
        return Vec::new();
    }
    let pairs = length / 2;
    let mut out = Vec::new();
    let mut tokens = Vec::with_capacity(length);
    extend_valid(pairs, vocab, 0, &mut tokens, &mut out);
    out
}

fn extend_valid(pairs: usize, vocab: u8, memory: u8, tokens: &mut Vec<Token>, out: &mut Vec<FflString>) {
    let k = tokens.len() / 2;
    if k == pairs {
        out.push(FflString(tokens.clone()));
        return;
    }
    let instrs: &[Token] = if k == 0 {
        &[Token::Write]
    } else if k == pairs - 1 {
        &[Token::Read]
    } else {
        &[Token::Write, Token::Read, Token::Ignore]
    };
    for &instr in instrs {
        let choices: Vec<u8> = if instr == Token::Read { vec![memory] } else { (0..vocab).collect() };
        for d in choices {
            tokens.push(instr);
            tokens.push(Token::Data(d));
            let next = if instr == Token::Write { d } else { memory };
            extend_valid(pairs, vocab, next, tokens, out);
            tokens.truncate(tokens.len() - 2);
        }
    }
}

/// All valid strings with length at most `max_len`.
pub fn enumerate_valid_up_to(max_len: usize, vocab: u8) -> Vec<FflString> {
    (4..=max_len).step_by(2).flat_map(|t| enumerate_valid(t, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let instrs = [Token::Write, Token::Read, Token::Ignore];
        for t in [4usize, 6, 8] {
            let pairs = t / 2;
            let mut brute = Vec::new();
            for code in 0..6usize.pow(pairs as u32) {
                let mut c = code;
                let mut v = Vec::new();
                for _ in 0..pairs {
                    v.push(instrs[c % 3]);
                    v.push(Token::Data(((c / 3) % 2) as u8));
                    c /= 6;
                }
                if validate_reads(&v) == Ok(ReadValidity::Valid) {
                    brute.push(FflString(v));
                }
            }
            let mut got = enumerate_valid(t, 2);
            brute.sort_by_key(|s| s.to_string());
            got.sort_by_key(|s| s.to_string());
            assert_eq!(got, brute, "length {t}");
        }
        assert_eq!(enumerate_valid(12, 2).len(), 2 * 5usize.pow(4));
    }

    #[test]
    fn structure_examples() {
        assert!(validate_structure(&toks("w0i1i0r0")));
        assert!(!validate_structure(&toks("r0w1")));
        assert!(!validate_structure(&toks("w0i1i0r")));
        assert!(!validate_structure(&toks("w0")));
        assert!(!validate_structure(&toks("w0r0i0")));
        assert!(!validate_structure(&toks("w0ri01")));
    }

    #[test]
    fn read_examples() {
        assert_eq!(
            validate_reads(&toks("w0i1w1r0")).unwrap(),
            ReadValidity::Violation { position: 8 }
        );
        assert_eq!(validate_reads(&toks("w0i1i0r0")).unwrap(), ReadValidity::Valid);
        assert_eq!(validate_reads(&toks("w1r1")).unwrap(), ReadValidity::Valid);
        assert_eq!(validate_reads(&toks("r0w1")), Err(FflError::Structure));
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_read(&toks("w1i0i1r")).unwrap(), 1);
        assert_eq!(oracle_read(&toks("w0i1w1i0r")).unwrap(), 1);
        assert_eq!(oracle_read(&toks("i0r")), Err(FflError::NoPriorWrite));
        assert_eq!(oracle_read(&toks("w0i1")), Err(FflError::NotRead));
    }

    #[test]
    fn simulate_examples() {
        let s = [Sigma::Set(1), Sigma::Hold, Sigma::Set(0), Sigma::Hold];
        assert_eq!(simulate(&s, 0), vec![1, 1, 0, 0]);
        assert_eq!(simulate(&[Sigma::Hold, Sigma::Hold], 0), vec![0, 0]);
    }

    #[test]
    fn monoid_table() {
        use Sigma::*;
        assert_eq!(monoid_compose(Hold, Set(1)), Set(1));
        assert_eq!(monoid_compose(Set(1), Set(0)), Set(1));
        assert_eq!(monoid_compose(Hold, Hold), Hold);
        assert_eq!(monoid_compose(Set(0), Hold), Set(0));
        assert_ne!(monoid_compose(Set(0), Set(1)), monoid_compose(Set(1), Set(0)));
    }

    #[test]
    fn monoid_associative_with_identity() {
        for a in Sigma::BINARY {
            assert_eq!(monoid_compose(Sigma::Hold, a), a);
            assert_eq!(monoid_compose(a, Sigma::Hold), a);
            for b in Sigma::BINARY {
                for c in Sigma::BINARY {
                    assert_eq!(
                        monoid_compose(monoid_compose(a, b), c),
                        monoid_compose(a, monoid_compose(b, c))
                    );
                }
            }
        }
        // σ0 absorbs from the left: nothing composed after it recovers σ1.
        for g in Sigma::BINARY {
            assert_ne!(monoid_compose(Sigma::Set(0), g), Sigma::Hold);
        }
    }

    #[test]
    fn sigma_sequence_examples() {
        use Sigma::*;
        assert_eq!(to_sigma_sequence(&toks("w1i0r1")).unwrap(), vec![Set(1), Hold, Hold]);
        assert_eq!(to_sigma_sequence(&toks("w0w1r1")).unwrap(), vec![Set(0), Set(1), Hold]);
        assert_eq!(to_sigma_sequence(&toks("w0w1r")), Err(FflError::Structure));
    }

    #[test]
    fn token_encoding_is_bijective() {
        for idx in 0..NUM_INSTRUCTIONS + MAX_VOCAB as usize {
            let t = Token::from_index(idx).unwrap();
            assert_eq!(t.index(), idx);
            assert_eq!(Token::from_char(t.to_char()), Some(t));
        }
        assert_eq!(Token::from_index(13), None);
        assert_eq!(Token::from_char('x'), None);
    }

    #[test]
    fn length_four_is_forced() {
        let params = FflParams::ffl_with_length(0.5, 4);
        for seed in 0..50 {
            let s = sample(&params, seed).to_string();
            let b = &s[1..2];
            assert_eq!(s, format!("w{b}r{b}"));
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let params = FflParams::ffl_with_length(0.8, 64);
        assert_eq!(sample(&params, 11), sample(&params, 11));
        assert_ne!(sample(&params, 11), sample(&params, 12));
    }

    #[test]
    fn params_validation() {
        assert!(FflParams::new(6, 0.2, 0.3, 2).is_ok());
        assert!(FflParams::new(5, 0.2, 0.3, 2).is_err());
        assert!(FflParams::new(8, 0.8, 0.3, 2).is_err());
        assert!(FflParams::new(8, 0.2, 0.3, 11).is_err());
        assert!(FflParams::new(8, 0.2, 0.3, 1).is_err());
        assert!((FflParams::ffl(0.8).expected_reads() - 26.4).abs() < 1e-12);
    }

    #[test]
    fn larger_vocab_sampling() {
        let params = FflParams::ffl_with_length(0.5, 200).with_vocab(7);
        let s = sample(&params, 5);
        assert_eq!(s.validate_reads(), ReadValidity::Valid);
        assert!(s.max_data_symbol().unwrap() < 7);
    }
}
