//! Probabilistic context-free grammar benchmark.
//!
//! Grammars are read from a small line format:
//!
//! ```text
//! # comment
//! %terminals astronomers saw stars
//! S  -> NP VP : 1.0
//! NP -> stars : 1.0
//! ```
//!
//! The first rule's left-hand side is the start symbol. Symbols that appear on
//! a left-hand side are non-terminals; everything else is a terminal. With a
//! `%terminals` line present, undeclared right-hand-side symbols are rejected.
//!
//! Trees are stored as their leftmost (pre-order) derivation. The likelihood
//! of a sentence `x` under a tree `z` is `exp(-L(x, s(z))²)` with `L` the
//! word-level Levenshtein distance and `s(z)` the tree's yield.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::dist::sample_index;
use crate::estimators::{
    reinforce_surrogate, sleep_phi_loss, vimco_surrogate, wake_phi_loss_with_score, wake_theta_surrogate,
    ParticleSet,
};
use crate::math;
use crate::nn::{linear_init, ParamGroup};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, StreamRng};
use crate::{Error, Result, Tensor};

/// The bundled astronomers grammar.
pub const ASTRONOMERS: &str = include_str!("../assets/astronomers.pcfg");

/// Tolerance on per-non-terminal probability sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Default expansion budget before termination forcing starts.
pub const DEFAULT_MAX_EXPANSIONS: usize = 50;

/// Logit added to disallowed rules.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(usize),
    NonTerminal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Production {
    pub rhs: Vec<Symbol>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    terminals: Vec<String>,
    nonterminals: Vec<String>,
    productions: Vec<Vec<Production>>,
    start: usize,
    offsets: Vec<usize>,
    /// Per non-terminal, the rules kept once the expansion budget is spent:
    /// those whose shortest complete derivation is shortest.
    forcing: Vec<Vec<usize>>,
}

struct RawRule {
    line: usize,
    lhs: String,
    rhs: Vec<String>,
    prob: f64,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::GrammarParse { line, message: message.into() }
}

impl FromStr for Grammar {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        Grammar::parse(text)
    }
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self> {
        let mut declared: Option<Vec<String>> = None;
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('%') {
                let mut words = rest.split_whitespace();
                match words.next() {
                    Some("terminals") => {
                        let list = declared.get_or_insert_with(Vec::new);
                        for w in words {
                            if !list.iter().any(|t| t == w) {
                                list.push(w.to_string());
                            }
                        }
                    }
                    other => return Err(parse_error(line_no, format!("unknown directive `%{}`", other.unwrap_or("")))),
                }
                continue;
            }
            let (lhs, rest) = content
                .split_once("->")
                .ok_or_else(|| parse_error(line_no, "expected `LHS -> symbols : probability`"))?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.split_whitespace().count() != 1 {
                return Err(parse_error(line_no, "left-hand side must be a single symbol"));
            }
            let (rhs, prob) = rest
                .rsplit_once(':')
                .ok_or_else(|| parse_error(line_no, "missing `: probability`"))?;
            let rhs: Vec<String> = rhs.split_whitespace().map(|s| s.to_string()).collect();
            if rhs.is_empty() {
                return Err(parse_error(line_no, "empty right-hand side"));
            }
            let prob: f64 = prob
                .trim()
                .parse()
                .map_err(|_| parse_error(line_no, format!("bad probability `{}`", prob.trim())))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(parse_error(line_no, format!("probability {prob} outside [0, 1]")));
            }
            raw.push(RawRule { line: line_no, lhs: lhs.to_string(), rhs, prob });
        }
        if raw.is_empty() {
            return Err(Error::InvalidGrammar(String::from("no rules")));
        }

        let mut nonterminals: Vec<String> = Vec::new();
        for r in &raw {
            if !nonterminals.contains(&r.lhs) {
                nonterminals.push(r.lhs.clone());
            }
        }
        let nt_index = |s: &str| nonterminals.iter().position(|n| n == s);
        let mut terminals: Vec<String> = declared.clone().unwrap_or_default();
        if let Some(t) = terminals.iter().find(|t| nt_index(t).is_some()) {
            return Err(Error::InvalidGrammar(format!("`{t}` is declared a terminal but has rules")));
        }
        let mut productions: Vec<Vec<Production>> = vec![Vec::new(); nonterminals.len()];
        for r in &raw {
            let mut rhs = Vec::with_capacity(r.rhs.len());
            for s in &r.rhs {
                let sym = if let Some(n) = nt_index(s) {
                    Symbol::NonTerminal(n)
                } else if let Some(t) = terminals.iter().position(|t| t == s) {
                    Symbol::Terminal(t)
                } else if declared.is_some() {
                    return Err(parse_error(r.line, format!("undeclared symbol `{s}`")));
                } else {
                    terminals.push(s.clone());
                    Symbol::Terminal(terminals.len() - 1)
                };
                rhs.push(sym);
            }
            productions[nt_index(&r.lhs).expect("lhs registered")].push(Production { rhs, prob: r.prob });
        }
        Grammar::new(terminals, nonterminals, productions, 0)
    }

    /// Builds and validates a grammar. `start` indexes `nonterminals`.
    pub fn new(
        terminals: Vec<String>,
        nonterminals: Vec<String>,
        productions: Vec<Vec<Production>>,
        start: usize,
    ) -> Result<Self> {
        if nonterminals.len() != productions.len() || start >= nonterminals.len() {
            return Err(Error::InvalidGrammar(String::from("rule table does not match the non-terminals")));
        }
        for (n, rules) in productions.iter().enumerate() {
            if rules.is_empty() {
                return Err(Error::InvalidGrammar(format!("`{}` has no rules", nonterminals[n])));
            }
            let total: f64 = rules.iter().map(|r| r.prob).sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidGrammar(format!(
                    "probabilities of `{}` sum to {total}",
                    nonterminals[n]
                )));
            }
            for r in rules {
                for s in &r.rhs {
                    let ok = match *s {
                        Symbol::Terminal(t) => t < terminals.len(),
                        Symbol::NonTerminal(m) => m < nonterminals.len(),
                    };
                    if !ok {
                        return Err(Error::InvalidGrammar(format!("rule of `{}` uses an unknown symbol", nonterminals[n])));
                    }
                }
            }
        }
        let forcing = forcing_rules(&productions)
            .map_err(|n| Error::InvalidGrammar(format!("`{}` cannot derive a finite sentence", nonterminals[n])))?;
        let mut offsets = Vec::with_capacity(productions.len());
        let mut acc = 0;
        for rules in &productions {
            offsets.push(acc);
            acc += rules.len();
        }
        Ok(Grammar { terminals, nonterminals, productions, start, offsets, forcing })
    }

    pub fn astronomers() -> Self {
        Grammar::parse(ASTRONOMERS).expect("bundled grammar is valid")
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn productions(&self, nonterminal: usize) -> &[Production] {
        &self.productions[nonterminal]
    }

    /// Total number of rules over all non-terminals.
    pub fn num_rules(&self) -> usize {
        self.productions.iter().map(Vec::len).sum()
    }

    /// Index of `(nonterminal, rule)` in the flat rule list.
    pub fn rule_id(&self, nonterminal: usize, rule: usize) -> usize {
        self.offsets[nonterminal] + rule
    }

    pub fn forcing_rules(&self, nonterminal: usize) -> &[usize] {
        &self.forcing[nonterminal]
    }

    /// Rule probabilities, one row per non-terminal.
    pub fn rule_probs(&self) -> Vec<Vec<f64>> {
        self.productions.iter().map(|rs| rs.iter().map(|r| r.prob).collect()).collect()
    }

    pub fn terminal_index(&self, word: &str) -> Option<usize> {
        self.terminals.iter().position(|t| t == word)
    }

    pub fn nonterminal_index(&self, name: &str) -> Option<usize> {
        self.nonterminals.iter().position(|t| t == name)
    }

    /// Words to terminal indices.
    pub fn encode_sentence(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.terminal_index(w).ok_or_else(|| Error::invalid(format!("unknown word `{w}`"))))
            .collect()
    }

    pub fn decode_sentence(&self, words: &[usize]) -> Vec<&str> {
        words.iter().map(|&w| self.terminals[w].as_str()).collect()
    }

    /// Same grammar with different rule probabilities.
    pub fn with_probs(&self, probs: &[Vec<f64>]) -> Result<Self> {
        if probs.len() != self.productions.len() || probs.iter().zip(&self.productions).any(|(p, r)| p.len() != r.len()) {
            return Err(Error::invalid("probability table does not match the grammar"));
        }
        let mut g = self.clone();
        for (rules, row) in g.productions.iter_mut().zip(probs) {
            for (r, &p) in rules.iter_mut().zip(row) {
                r.prob = p;
            }
        }
        Grammar::new(g.terminals, g.nonterminals, g.productions, g.start)
    }

    /// Expected number of times each rule is used per tree, when sampling
    /// without a budget. Requires sub-critical branching.
    pub fn expected_rule_usage(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.nonterminals.len();
        // Expected visits v solve v = e_start + vᵀ M, with M[a][b] the mean
        // number of `b` children produced by one expansion of `a`.
        let mut a = vec![vec![0.0; n]; n];
        for (i, rules) in self.productions.iter().enumerate() {
            for r in rules {
                for s in &r.rhs {
                    if let Symbol::NonTerminal(m) = *s {
                        a[i][m] += r.prob;
                    }
                }
            }
        }
        // Solve (I - Mᵀ) v = e_start.
        let mut mat: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - a[j][i]).collect();
                row.push(if i == self.start { 1.0 } else { 0.0 });
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| mat[x][col].abs().partial_cmp(&mat[y][col].abs()).unwrap_or(core::cmp::Ordering::Equal))
                .expect("non-empty");
            if mat[pivot][col].abs() < 1e-12 {
                return Err(Error::InvalidGrammar(String::from("branching is not sub-critical")));
            }
            mat.swap(col, pivot);
            for r in 0..n {
                if r != col {
                    let f = mat[r][col] / mat[col][col];
                    for c in col..=n {
                        mat[r][c] -= f * mat[col][c];
                    }
                }
            }
        }
        let visits: Vec<f64> = (0..n).map(|i| mat[i][n] / mat[i][i]).collect();
        if visits.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidGrammar(String::from("branching is not sub-critical")));
        }
        Ok(self
            .productions
            .iter()
            .enumerate()
            .map(|(i, rules)| rules.iter().map(|r| visits[i] * r.prob).collect())
            .collect())
    }
}

/// Rules of minimal derivation height per non-terminal, or the index of a
/// non-terminal that cannot terminate.
fn forcing_rules(productions: &[Vec<Production>]) -> core::result::Result<Vec<Vec<usize>>, usize> {
    let n = productions.len();
    let mut height = vec![usize::MAX; n];
    let rule_height = |r: &Production, height: &[usize]| -> usize {
        let mut h = 1usize;
        for s in &r.rhs {
            if let Symbol::NonTerminal(m) = *s {
                if height[m] == usize::MAX {
                    return usize::MAX;
                }
                h = h.max(height[m] + 1);
            }
        }
        h
    };
    loop {
        let mut changed = false;
        for i in 0..n {
            let best = productions[i].iter().map(|r| rule_height(r, &height)).min().unwrap_or(usize::MAX);
            if best < height[i] {
                height[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(bad) = height.iter().position(|&h| h == usize::MAX) {
        return Err(bad);
    }
    Ok((0..n)
        .map(|i| {
            (0..productions[i].len())
                .filter(|&r| rule_height(&productions[i][r], &height) == height[i])
                .collect()
        })
        .collect())
}

/// One step of a leftmost derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expansion {
    pub nonterminal: usize,
    pub rule: usize,
    /// The step was taken after the expansion budget ran out.
    pub forced: bool,
}

/// A parse tree as its leftmost derivation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParseTree {
    expansions: Vec<Expansion>,
}

impl ParseTree {
    /// Checks that `expansions` is a complete leftmost derivation.
    pub fn new(grammar: &Grammar, expansions: Vec<Expansion>) -> Result<Self> {
        let mut stack = vec![grammar.start];
        for e in &expansions {
            let top = stack.pop().ok_or_else(|| Error::invalid("derivation continues after completion"))?;
            if top != e.nonterminal {
                return Err(Error::invalid("derivation does not expand the leftmost non-terminal"));
            }
            let rules = grammar.productions(top);
            let rule = rules.get(e.rule).ok_or(Error::IndexOutOfRange { index: e.rule, len: rules.len() })?;
            push_children(&mut stack, &rule.rhs);
        }
        if !stack.is_empty() {
            return Err(Error::invalid("derivation is incomplete"));
        }
        Ok(ParseTree { expansions })
    }

    pub fn expansions(&self) -> &[Expansion] {
        &self.expansions
    }

    pub fn len(&self) -> usize {
        self.expansions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expansions.is_empty()
    }

    pub fn is_forced(&self) -> bool {
        self.expansions.iter().any(|e| e.forced)
    }

    /// Terminal indices, left to right.
    pub fn yield_words(&self, grammar: &Grammar) -> Vec<usize> {
        let mut out = Vec::new();
        let mut steps = self.expansions.iter();
        let mut stack = vec![Symbol::NonTerminal(grammar.start)];
        while let Some(sym) = stack.pop() {
            match sym {
                Symbol::Terminal(t) => out.push(t),
                Symbol::NonTerminal(_) => {
                    let e = steps.next().expect("validated derivation");
                    stack.extend(grammar.productions(e.nonterminal)[e.rule].rhs.iter().rev());
                }
            }
        }
        out
    }

    pub fn sentence<'g>(&self, grammar: &'g Grammar) -> Vec<&'g str> {
        grammar.decode_sentence(&self.yield_words(grammar))
    }

    /// Bracketed notation, e.g. `(S (NP astronomers) (VP (V saw) (NP stars)))`.
    pub fn bracketed(&self, grammar: &Grammar) -> String {
        fn walk(grammar: &Grammar, steps: &mut core::slice::Iter<'_, Expansion>, out: &mut String) {
            let e = steps.next().expect("validated derivation");
            out.push('(');
            out.push_str(&grammar.nonterminals[e.nonterminal]);
            for s in &grammar.productions(e.nonterminal)[e.rule].rhs {
                out.push(' ');
                match *s {
                    Symbol::Terminal(t) => out.push_str(&grammar.terminals[t]),
                    Symbol::NonTerminal(_) => walk(grammar, steps, out),
                }
            }
            out.push(')');
        }
        let mut out = String::new();
        walk(grammar, &mut self.expansions.iter(), &mut out);
        out
    }

    /// `log p(z)` under rule probabilities `probs`. Forced steps use the
    /// probabilities renormalized over the forcing rules.
    pub fn log_prob(&self, grammar: &Grammar, probs: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for e in &self.expansions {
            let row = probs.get(e.nonterminal).ok_or(Error::IndexOutOfRange { index: e.nonterminal, len: probs.len() })?;
            let p = *row.get(e.rule).ok_or(Error::IndexOutOfRange { index: e.rule, len: row.len() })?;
            total += math::ln(p);
            if e.forced {
                let mass: f64 = grammar.forcing_rules(e.nonterminal).iter().map(|&r| row[r]).sum();
                total -= math::ln(mass);
            }
        }
        Ok(total)
    }
}

fn push_children(stack: &mut Vec<usize>, rhs: &[Symbol]) {
    for s in rhs.iter().rev() {
        if let Symbol::NonTerminal(m) = *s {
            stack.push(m);
        }
    }
}

/// Ancestral sample under rule probabilities `probs`. After `max_expansions`
/// steps the remaining non-terminals are expanded with the forcing rules.
pub fn sample_tree<R: Rng + ?Sized>(
    grammar: &Grammar,
    probs: &[Vec<f64>],
    max_expansions: usize,
    rng: &mut R,
) -> ParseTree {
    let mut expansions = Vec::new();
    let mut stack = vec![grammar.start];
    while let Some(nt) = stack.pop() {
        let forced = expansions.len() >= max_expansions;
        let row = &probs[nt];
        let rule = if forced {
            let allowed = grammar.forcing_rules(nt);
            let weights: Vec<f64> = allowed.iter().map(|&r| row[r]).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                allowed[sample_index(&weights.iter().map(|w| w / total).collect::<Vec<_>>(), rng)]
            } else {
                allowed[0]
            }
        } else {
            sample_index(row, rng)
        };
        expansions.push(Expansion { nonterminal: nt, rule, forced });
        push_children(&mut stack, &grammar.productions(nt)[rule].rhs);
    }
    ParseTree { expansions }
}

/// Word-level edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `log p(x|z) = -L(x, s(z))²`.
pub fn relaxed_log_likelihood<T: PartialEq>(sentence: &[T], tree_yield: &[T]) -> f64 {
    let d = levenshtein(sentence, tree_yield) as f64;
    -d * d
}

/// Mean over non-terminals of `KL(true ‖ learned)`. Infinite when the
/// learned row puts zero mass on a rule with positive true mass.
pub fn production_kl(true_probs: &[Vec<f64>], learned: &[Vec<f64>]) -> Result<f64> {
    if true_probs.is_empty() || true_probs.len() != learned.len() {
        return Err(Error::invalid("probability tables do not match"));
    }
    let mut total = 0.0;
    for (p, q) in true_probs.iter().zip(learned) {
        if p.len() != q.len() {
            return Err(Error::invalid("probability rows do not match"));
        }
        for (&pi, &qi) in p.iter().zip(q) {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += pi * (math::ln(pi) - math::ln(qi));
            }
        }
    }
    Ok(total / true_probs.len() as f64)
}

/// Differentiable `log p(z)` for each tree, with rule logits `theta` (one
/// vector per non-terminal). Returns shape `[trees.len()]`.
pub fn tree_log_probs<'t>(grammar: &Grammar, theta: &[Var<'t>], trees: &[ParseTree]) -> Result<Var<'t>> {
    let n_nt = grammar.nonterminals.len();
    if theta.len() != n_nt {
        return Err(Error::invalid("one logit vector per non-terminal is required"));
    }
    let tape = theta[0].tape();
    let mut parts = Vec::with_capacity(2 * n_nt);
    let mut forced_offset = vec![None; n_nt];
    for lp in theta {
        parts.push(lp.log_softmax()?);
    }
    let mut pos = grammar.num_rules();
    for n in 0..n_nt {
        let allowed = grammar.forcing_rules(n);
        if allowed.len() == grammar.productions(n).len() {
            continue;
        }
        let lsm = parts[n];
        let norm = lsm.gather(allowed)?.log_sum_exp()?;
        let all: Vec<usize> = (0..grammar.productions(n).len()).collect();
        parts.push(lsm.gather(&all)?.sub(norm)?);
        forced_offset[n] = Some(pos);
        pos += all.len();
    }
    let flat = Var::concat(&parts)?;
    let mut index = Vec::new();
    let mut segment = Vec::new();
    for (i, t) in trees.iter().enumerate() {
        for e in &t.expansions {
            let base = match (e.forced, forced_offset[e.nonterminal]) {
                (true, Some(off)) => off,
                _ => grammar.offsets[e.nonterminal],
            };
            index.push(base + e.rule);
            segment.push(i);
        }
    }
    if index.is_empty() {
        return tape.constant_from(vec![trees.len()], vec![0.0; trees.len()]);
    }
    flat.gather(&index)?.segment_sum(&segment, trees.len())
}

pub const WORD_EMBEDDING: usize = 16;
pub const ENCODER_HIDDEN: usize = 64;
pub const DECISION_HIDDEN: usize = 64;
pub const RULE_EMBEDDING: usize = 16;
pub const ADDRESS_EMBEDDING: usize = 16;

// Parameter tensor order.
const WORD_EMB: usize = 0;
const ENC_IN: usize = 1;
const ENC_REC: usize = 2;
const ENC_BIAS: usize = 3;
const RULE_EMB: usize = 4;
const ADDR_EMB: usize = 5;
const DEC_IN: usize = 6;
const DEC_REC: usize = 7;
const DEC_BIAS: usize = 8;
const OUT_W: usize = 9;
const OUT_BIAS: usize = 10;

/// Amortized proposal over parse trees given a sentence.
///
/// A recurrent encoder turns the one-hot word sequence into a sentence
/// embedding. A second recurrence then emits the leftmost derivation one rule
/// at a time; its input at each step is the sentence embedding, an embedding
/// of the previously chosen rule and an embedding of the non-terminal being
/// expanded. Logits outside that non-terminal's rules are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseNet {
    params: ParamGroup,
    max_expansions: usize,
}

/// Trees drawn or scored by [`ParseNet::propose`] / [`ParseNet::score`] and
/// their differentiable `log q`.
pub struct Proposal<'t> {
    pub trees: Vec<ParseTree>,
    pub log_q: Var<'t>,
}

enum Choice<'a, R: ?Sized> {
    Sample(&'a mut R),
    Replay(&'a [ParseTree]),
}

impl ParseNet {
    pub fn new<R: Rng + ?Sized>(grammar: &Grammar, max_expansions: usize, rng: &mut R) -> Self {
        let v = grammar.terminals.len();
        let r = grammar.num_rules();
        let n = grammar.nonterminals.len();
        let mut tensors = Vec::new();
        let (word, _) = linear_init(1, v * WORD_EMBEDDING, rng);
        tensors.push(Tensor::new(vec![v, WORD_EMBEDDING], word.into_data()).expect("shape"));
        let (w, b) = linear_init(WORD_EMBEDDING, ENCODER_HIDDEN, rng);
        let (u, _) = linear_init(ENCODER_HIDDEN, ENCODER_HIDDEN, rng);
        tensors.extend([w, u, b]);
        let (rule, _) = linear_init(1, (r + 1) * RULE_EMBEDDING, rng);
        tensors.push(Tensor::new(vec![r + 1, RULE_EMBEDDING], rule.into_data()).expect("shape"));
        let (addr, _) = linear_init(1, n * ADDRESS_EMBEDDING, rng);
        tensors.push(Tensor::new(vec![n, ADDRESS_EMBEDDING], addr.into_data()).expect("shape"));
        let (w, b) = linear_init(ENCODER_HIDDEN + RULE_EMBEDDING + ADDRESS_EMBEDDING, DECISION_HIDDEN, rng);
        let (u, _) = linear_init(DECISION_HIDDEN, DECISION_HIDDEN, rng);
        tensors.extend([w, u, b]);
        let (w, b) = linear_init(DECISION_HIDDEN, r, rng);
        tensors.extend([w, b]);
        ParseNet { params: ParamGroup::new(tensors), max_expansions }
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamGroup {
        &mut self.params
    }

    pub fn max_expansions(&self) -> usize {
        self.max_expansions
    }

    /// Sentence embeddings `[S, ENCODER_HIDDEN]` for word-index sequences.
    pub fn encode<'t>(&self, vars: &[Var<'t>], sentences: &[Vec<usize>]) -> Result<Var<'t>> {
        let tape = vars[0].tape();
        if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
            return Err(Error::invalid("sentences must be non-empty"));
        }
        let vocab = vars[WORD_EMB].shape()[0];
        if let Some(&w) = sentences.iter().flatten().find(|&&w| w >= vocab) {
            return Err(Error::IndexOutOfRange { index: w, len: vocab });
        }
        // Longest first, so the sentences still running are always a prefix.
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.sort_by_key(|&i| core::cmp::Reverse(sentences[i].len()));
        let longest = sentences[order[0]].len();
        let active_at = |t: usize| order.iter().take_while(|&&i| sentences[i].len() > t).count();

        let mut h = tape.constant_from(vec![active_at(0), ENCODER_HIDDEN], vec![0.0; active_at(0) * ENCODER_HIDDEN])?;
        let mut finished = Vec::new();
        let mut finished_order = Vec::new();
        for t in 0..longest {
            let m = active_at(t);
            if h.shape()[0] != m {
                h = h.select_rows(&(0..m).collect::<Vec<_>>())?;
            }
            let words: Vec<usize> = order[..m].iter().map(|&i| sentences[i][t]).collect();
            let e = vars[WORD_EMB].select_rows(&words)?;
            h = e
                .matmul(vars[ENC_IN])?
                .add(h.matmul(vars[ENC_REC])?)?
                .add(vars[ENC_BIAS].expand_rows(m)?)?
                .tanh()?;
            let next = active_at(t + 1);
            if next < m {
                finished.push(h.select_rows(&(next..m).collect::<Vec<_>>())?);
                finished_order.extend_from_slice(&order[next..m]);
            }
        }
        let all = Var::concat_rows(&finished)?;
        let mut position = vec![0; sentences.len()];
        for (p, &s) in finished_order.iter().enumerate() {
            position[s] = p;
        }
        all.select_rows(&position)
    }

    /// Draws one tree per row; row `i` is conditioned on sentence
    /// `row_sentence[i]` of `embeddings`.
    pub fn propose<'t, R: Rng + ?Sized>(
        &self,
        grammar: &Grammar,
        vars: &[Var<'t>],
        embeddings: Var<'t>,
        row_sentence: &[usize],
        rng: &mut R,
    ) -> Result<Proposal<'t>> {
        self.run(grammar, vars, embeddings, row_sentence, Choice::Sample(rng))
    }

    /// `log q` of given trees; row `i` is conditioned on sentence
    /// `row_sentence[i]`.
    pub fn score<'t>(
        &self,
        grammar: &Grammar,
        vars: &[Var<'t>],
        embeddings: Var<'t>,
        row_sentence: &[usize],
        trees: &[ParseTree],
    ) -> Result<Var<'t>> {
        if trees.len() != row_sentence.len() {
            return Err(Error::invalid("one tree per row is required"));
        }
        let choice: Choice<'_, StreamRng> = Choice::Replay(trees);
        Ok(self.run(grammar, vars, embeddings, row_sentence, choice)?.log_q)
    }

    fn run<'t, R: Rng + ?Sized>(
        &self,
        grammar: &Grammar,
        vars: &[Var<'t>],
        embeddings: Var<'t>,
        row_sentence: &[usize],
        mut choice: Choice<'_, R>,
    ) -> Result<Proposal<'t>> {
        let tape = vars[0].tape();
        let rows = row_sentence.len();
        let n_rules = grammar.num_rules();
        if rows == 0 {
            return Err(Error::invalid("no rows to propose for"));
        }
        let context = embeddings.select_rows(row_sentence)?;
        let mut stacks: Vec<Vec<usize>> = vec![vec![grammar.start]; rows];
        let mut prev_rule = vec![n_rules; rows];
        let mut expansions: Vec<Vec<Expansion>> = vec![Vec::new(); rows];
        let mut active: Vec<usize> = (0..rows).collect();
        let mut h = tape.constant_from(vec![rows, DECISION_HIDDEN], vec![0.0; rows * DECISION_HIDDEN])?;
        let mut pieces = Vec::new();
        let mut segments = Vec::new();

        while !active.is_empty() {
            let a = active.len();
            let nts: Vec<usize> = active.iter().map(|&r| *stacks[r].last().expect("active rows have work")).collect();
            let input = Var::concat(&[
                context.select_rows(&active)?,
                vars[RULE_EMB].select_rows(&active.iter().map(|&r| prev_rule[r]).collect::<Vec<_>>())?,
                vars[ADDR_EMB].select_rows(&nts)?,
            ])?;
            h = input
                .matmul(vars[DEC_IN])?
                .add(h.matmul(vars[DEC_REC])?)?
                .add(vars[DEC_BIAS].expand_rows(a)?)?
                .tanh()?;
            let logits = h.matmul(vars[OUT_W])?.add(vars[OUT_BIAS].expand_rows(a)?)?;

            let mut mask = vec![MASKED; a * n_rules];
            let mut forced = vec![false; a];
            for (i, &r) in active.iter().enumerate() {
                let nt = nts[i];
                forced[i] = expansions[r].len() >= self.max_expansions;
                let allowed: &[usize] = if forced[i] {
                    grammar.forcing_rules(nt)
                } else {
                    &(0..grammar.productions(nt).len()).collect::<Vec<_>>()
                };
                for &rule in allowed {
                    mask[i * n_rules + grammar.rule_id(nt, rule)] = 0.0;
                }
            }
            let log_probs = logits.add(tape.constant_from(vec![a, n_rules], mask)?)?.log_softmax()?;
            let lp_values = log_probs.value();

            let mut chosen = Vec::with_capacity(a);
            for (i, &r) in active.iter().enumerate() {
                let nt = nts[i];
                let offset = grammar.rule_id(nt, 0);
                let count = grammar.productions(nt).len();
                let rule = match &mut choice {
                    Choice::Sample(rng) => {
                        let probs: Vec<f64> =
                            lp_values[i * n_rules + offset..i * n_rules + offset + count].iter().map(|&l| math::exp(l)).collect();
                        sample_index(&probs, &mut **rng)
                    }
                    Choice::Replay(trees) => {
                        let e = trees[r]
                            .expansions
                            .get(expansions[r].len())
                            .ok_or_else(|| Error::invalid("tree is shorter than its derivation"))?;
                        if e.nonterminal != nt || e.rule >= count {
                            return Err(Error::invalid("tree does not match the grammar"));
                        }
                        if lp_values[i * n_rules + offset + e.rule] <= MASKED / 2.0 {
                            return Err(Error::invalid("tree is outside the proposal's support"));
                        }
                        e.rule
                    }
                };
                chosen.push(offset + rule);
                expansions[r].push(Expansion { nonterminal: nt, rule, forced: forced[i] });
                stacks[r].pop();
                push_children(&mut stacks[r], &grammar.productions(nt)[rule].rhs);
                prev_rule[r] = offset + rule;
            }
            pieces.push(log_probs.gather(&chosen)?.reshape(vec![a])?);
            segments.extend_from_slice(&active);

            let keep: Vec<usize> = (0..a).filter(|&i| !stacks[active[i]].is_empty()).collect();
            if keep.len() < a && !keep.is_empty() {
                h = h.select_rows(&keep)?;
            }
            active = keep.iter().map(|&i| active[i]).collect();
        }
        if let Choice::Replay(trees) = &choice {
            if trees.iter().zip(&expansions).any(|(t, e)| t.expansions.len() != e.len()) {
                return Err(Error::invalid("tree is longer than its derivation"));
            }
        }
        let log_q = Var::concat_rows(&pieces)?.segment_sum(&segments, rows)?;
        let trees = expansions.into_iter().map(|expansions| ParseTree { expansions }).collect();
        Ok(Proposal { trees, log_q })
    }

    /// `q` samples for one sentence, grouped by tree and sorted by count.
    pub fn posterior_samples<R: Rng + ?Sized>(
        &self,
        grammar: &Grammar,
        sentence: &[usize],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(ParseTree, usize)>> {
        let tape = Tape::new();
        let vars = self.params.bind_constant(&tape)?;
        let emb = self.encode(&vars, &[sentence.to_vec()])?;
        let proposal = self.propose(grammar, &vars, emb, &vec![0; n], rng)?;
        let mut counts: BTreeMap<ParseTree, usize> = BTreeMap::new();
        for t in proposal.trees {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut out: Vec<(ParseTree, usize)> = counts.into_iter().collect();
        out.sort_by(|a, b| b.1.cmp(&a.1));
        Ok(out)
    }
}

/// Mean of `-log q(z|s(z))` over trees `z` (typically drawn from the true
/// grammar). Equals the expected posterior KL up to the conditional entropy.
pub fn sleep_loss_proxy(net: &ParseNet, grammar: &Grammar, trees: &[ParseTree]) -> Result<f64> {
    if trees.is_empty() {
        return Err(Error::invalid("proxy needs at least one tree"));
    }
    let tape = Tape::new();
    let vars = net.params().bind_constant(&tape)?;
    let sentences: Vec<Vec<usize>> = trees.iter().map(|t| t.yield_words(grammar)).collect();
    let emb = net.encode(&vars, &sentences)?;
    let rows: Vec<usize> = (0..trees.len()).collect();
    let log_q = net.score(grammar, &vars, emb, &rows, trees)?;
    Ok(-log_q.value().iter().sum::<f64>() / trees.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PcfgMethod {
    Ws,
    Ww,
    Vimco,
    Reinforce,
}

impl PcfgMethod {
    pub const ALL: [PcfgMethod; 4] = [PcfgMethod::Ws, PcfgMethod::Ww, PcfgMethod::Vimco, PcfgMethod::Reinforce];

    pub fn name(self) -> &'static str {
        match self {
            PcfgMethod::Ws => "ws",
            PcfgMethod::Ww => "ww",
            PcfgMethod::Vimco => "vimco",
            PcfgMethod::Reinforce => "reinforce",
        }
    }
}

impl fmt::Display for PcfgMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PcfgMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PcfgMethod::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pcfg method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcfgConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub cadence: usize,
    pub max_expansions: usize,
    /// Wall-clock cap per run in seconds.
    pub wallclock_cap_s: f64,
    pub proxy_samples: usize,
    /// Size of a fixed training corpus; `None` streams fresh sentences.
    pub corpus_size: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for PcfgConfig {
    fn default() -> Self {
        PcfgConfig {
            batch_size: 2,
            iterations: 2000,
            cadence: 100,
            max_expansions: DEFAULT_MAX_EXPANSIONS,
            wallclock_cap_s: 7200.0,
            proxy_samples: 100,
            corpus_size: None,
            adam: AdamConfig::default(),
        }
    }
}

impl PcfgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.cadence == 0 || self.max_expansions == 0 || self.proxy_samples == 0 {
            return Err(Error::invalid("batch size, cadence, max expansions and proxy samples must be positive"));
        }
        if !(self.wallclock_cap_s > 0.0) {
            return Err(Error::invalid("wall-clock cap must be positive"));
        }
        if self.corpus_size == Some(0) {
            return Err(Error::invalid("a fixed corpus needs at least one sentence"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcfgMetrics {
    pub iteration: usize,
    pub production_kl: f64,
    pub sleep_loss_proxy: f64,
    pub wallclock_s: f64,
}

/// Metrics log of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct PcfgRun {
    pub log: Vec<PcfgMetrics>,
    /// The run stopped at the wall-clock cap before its iteration budget.
    pub capped: bool,
}

impl PcfgRun {
    pub fn terminal(&self) -> Option<&PcfgMetrics> {
        self.log.last()
    }
}

/// Training state for one `(method, K, seed)` run.
pub struct PcfgTrainer {
    grammar: Grammar,
    true_probs: Vec<Vec<f64>>,
    config: PcfgConfig,
    method: PcfgMethod,
    k: usize,
    seed: u64,
    theta: ParamGroup,
    net: ParseNet,
    adam_theta: AdamState,
    adam_phi: AdamState,
    data_rng: StreamRng,
    particle_rng: StreamRng,
    corpus: Option<Vec<Vec<usize>>>,
    proxy_trees: Vec<ParseTree>,
    iteration: usize,
}

impl PcfgTrainer {
    /// `grammar` holds the true rule probabilities. The learned model starts
    /// from uniform rule probabilities.
    pub fn new(grammar: Grammar, config: PcfgConfig, method: PcfgMethod, k: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if k == 0 || (method == PcfgMethod::Vimco && k < 2) {
            return Err(Error::invalid(format!("{method} cannot run with K = {k}")));
        }
        let true_probs = grammar.rule_probs();
        let theta = ParamGroup::new(true_probs.iter().map(|row| Tensor::vector(vec![0.0; row.len()])).collect());
        let net = ParseNet::new(&grammar, config.max_expansions, &mut stream(seed, 0, "pcfg-init"));
        let mut proxy_rng = stream(seed, 0, "pcfg-proxy");
        let proxy_trees = (0..config.proxy_samples)
            .map(|_| sample_tree(&grammar, &true_probs, config.max_expansions, &mut proxy_rng))
            .collect();
        let corpus = config.corpus_size.map(|n| {
            let mut rng = stream(seed, 0, "pcfg-corpus");
            (0..n)
                .map(|_| sample_tree(&grammar, &true_probs, config.max_expansions, &mut rng).yield_words(&grammar))
                .collect()
        });
        Ok(PcfgTrainer {
            adam_theta: AdamState::new(&theta, config.adam),
            adam_phi: AdamState::new(net.params(), config.adam),
            data_rng: stream(seed, k, "pcfg-data"),
            particle_rng: stream(seed, k, "pcfg-particles"),
            grammar,
            true_probs,
            config,
            method,
            k,
            seed,
            theta,
            net,
            corpus,
            proxy_trees,
            iteration: 0,
        })
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn config(&self) -> &PcfgConfig {
        &self.config
    }

    pub fn method(&self) -> PcfgMethod {
        self.method
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn net(&self) -> &ParseNet {
        &self.net
    }

    /// Current rule probabilities.
    pub fn learned_probs(&self) -> Vec<Vec<f64>> {
        self.theta.tensors().iter().map(|t| math::softmax(t.data())).collect()
    }

    pub fn production_kl(&self) -> Result<f64> {
        production_kl(&self.true_probs, &self.learned_probs())
    }

    pub fn sleep_loss_proxy(&self) -> Result<f64> {
        sleep_loss_proxy(&self.net, &self.grammar, &self.proxy_trees)
    }

    pub fn metrics(&self, wallclock_s: f64) -> Result<PcfgMetrics> {
        Ok(PcfgMetrics {
            iteration: self.iteration,
            production_kl: self.production_kl()?,
            sleep_loss_proxy: self.sleep_loss_proxy()?,
            wallclock_s,
        })
    }

    fn next_batch(&mut self) -> Vec<Vec<usize>> {
        let b = self.config.batch_size;
        match &self.corpus {
            Some(corpus) => (0..b).map(|_| corpus[self.data_rng.random_range(0..corpus.len())].clone()).collect(),
            None => (0..b)
                .map(|_| {
                    sample_tree(&self.grammar, &self.true_probs, self.config.max_expansions, &mut self.data_rng)
                        .yield_words(&self.grammar)
                })
                .collect(),
        }
    }

    /// One optimizer step on a fresh batch. Returns the batch IWAE bound.
    pub fn step(&mut self) -> Result<f64> {
        let xs = self.next_batch();
        let (b, k) = (xs.len(), self.k);
        let tape = Tape::new();
        let theta = self.theta.bind(&tape)?;
        let phi = self.net.params().bind(&tape)?;
        let emb = self.net.encode(&phi, &xs)?;
        let rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let proposal = self.net.propose(&self.grammar, &phi, emb, &rows, &mut self.particle_rng)?;
        let log_prior = tree_log_probs(&self.grammar, &theta, &proposal.trees)?;
        let log_lik: Vec<f64> = proposal
            .trees
            .iter()
            .zip(&rows)
            .map(|(t, &r)| relaxed_log_likelihood(&xs[r], &t.yield_words(&self.grammar)))
            .collect();
        let log_joint = log_prior.add(tape.constant_from(vec![b * k], log_lik)?)?.reshape(vec![b, k])?;
        let log_q = proposal.log_q.reshape(vec![b, k])?;
        let ps = ParticleSet::new(log_joint, log_q)?;
        let elbo = crate::estimators::iwae_elbo(&ps)?.item();

        let loss = match self.method {
            PcfgMethod::Ws => {
                let probs = self.learned_probs();
                let dreams: Vec<ParseTree> = (0..b * k)
                    .map(|_| sample_tree(&self.grammar, &probs, self.config.max_expansions, &mut self.particle_rng))
                    .collect();
                let sentences: Vec<Vec<usize>> = dreams.iter().map(|t| t.yield_words(&self.grammar)).collect();
                let dream_emb = self.net.encode(&phi, &sentences)?;
                let dream_rows: Vec<usize> = (0..dreams.len()).collect();
                let dream_q = self.net.score(&self.grammar, &phi, dream_emb, &dream_rows, &dreams)?;
                wake_theta_surrogate(&ps)?.neg()?.add(sleep_phi_loss(dream_q)?)?
            }
            PcfgMethod::Ww => wake_theta_surrogate(&ps)?.neg()?.add(wake_phi_loss_with_score(&ps, log_q)?)?,
            PcfgMethod::Reinforce => reinforce_surrogate(&ps)?.neg()?,
            PcfgMethod::Vimco => vimco_surrogate(&ps)?.neg()?,
        };
        let grads = tape.backward(loss)?;
        self.adam_theta.step(&mut self.theta, &ParamGroup::gradients(&grads, &theta))?;
        self.adam_phi.step(self.net.params_mut(), &ParamGroup::gradients(&grads, &phi))?;
        self.iteration += 1;
        Ok(elbo)
    }

    /// Trains until the iteration budget or the wall-clock cap, whichever
    /// comes first. `clock` returns seconds since the run started. Metrics
    /// are logged at iteration 0, every `cadence` iterations, and at the end.
    pub fn run<C, F>(&mut self, mut clock: C, mut on_metrics: F) -> Result<PcfgRun>
    where
        C: FnMut() -> f64,
        F: FnMut(&PcfgMetrics),
    {
        let mut log = Vec::new();
        let mut record = |this: &Self, log: &mut Vec<PcfgMetrics>, t: f64| -> Result<()> {
            let m = this.metrics(t)?;
            on_metrics(&m);
            log.push(m);
            Ok(())
        };
        record(self, &mut log, clock())?;
        let mut capped = false;
        while self.iteration < self.config.iterations {
            if clock() >= self.config.wallclock_cap_s {
                capped = true;
                break;
            }
            self.step()?;
            if self.iteration % self.config.cadence == 0 {
                record(self, &mut log, clock())?;
            }
        }
        if log.last().map(|m| m.iteration) != Some(self.iteration) {
            record(self, &mut log, clock())?;
        }
        Ok(PcfgRun { log, capped })
    }
}
