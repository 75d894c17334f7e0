//! Synthetic environments with rule-verified binary rewards.
//!
//! All tasks share one token vocabulary: ten reserved control tokens
//! followed by symbol tokens, where symbol value `v` is token
//! `SYMBOL_BASE + v`. Multi-turn episodes write integers as decimal digits
//! (symbols 0..=9).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Token;
use crate::rng::{self, Domain};

pub const BOS: Token = 0;
pub const EOS: Token = 1;
pub const TOOL_CALL: Token = 2;
pub const TOOL_RESULT: Token = 3;
pub const ANSWER: Token = 4;
pub const SEP: Token = 5;
pub const PLUS: Token = 6;
pub const MINUS: Token = 7;
pub const TIMES: Token = 8;
pub const ERROR: Token = 9;
pub const SYMBOL_BASE: Token = 10;

/// Human-readable name of a token.
pub fn token_name(t: Token) -> String {
    match t {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        TOOL_CALL => "<call>".into(),
        TOOL_RESULT => "<result>".into(),
        ANSWER => "<answer>".into(),
        SEP => "|".into(),
        PLUS => "+".into(),
        MINUS => "-".into(),
        TIMES => "*".into(),
        ERROR => "<error>".into(),
        s => format!("{}", s - SYMBOL_BASE),
    }
}

pub fn symbol(v: usize) -> Token {
    SYMBOL_BASE + v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    CopyReverse,
    ModularSum,
    MultiTurnCalc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Modulus of `modular-sum`.
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    /// Inclusive prompt length range for `copy-reverse` (BOS and SEP count).
    #[serde(default = "default_prompt_len")]
    pub prompt_len: [usize; 2],
    /// Longest answer the verifier accepts.
    #[serde(default = "default_answer_len")]
    pub answer_len: usize,
    /// Model turns per `multi-turn-calc` episode.
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    /// Tokens per model turn before it is cut off.
    #[serde(default = "default_turn_budget")]
    pub turn_budget: usize,
    /// Operands are drawn from `0..=operand_max`; `modular-sum` also caps
    /// them at `modulus - 1`.
    #[serde(default = "default_operand_max")]
    pub operand_max: usize,
}

fn default_modulus() -> usize {
    17
}
fn default_prompt_len() -> [usize; 2] {
    [4, 6]
}
fn default_answer_len() -> usize {
    4
}
fn default_max_turns() -> usize {
    3
}
fn default_turn_budget() -> usize {
    8
}
fn default_operand_max() -> usize {
    9
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            vocab_size: 32,
            modulus: default_modulus(),
            prompt_len: default_prompt_len(),
            answer_len: default_answer_len(),
            max_turns: default_max_turns(),
            turn_budget: default_turn_budget(),
            operand_max: default_operand_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = match self.kind {
            TaskKind::ModularSum => {
                if self.modulus < 2 {
                    return Err(Error::Task("modulus must be at least 2".into()));
                }
                SYMBOL_BASE + self.modulus
            }
            TaskKind::CopyReverse => {
                let [lo, hi] = self.prompt_len;
                if lo < 3 || lo > hi {
                    return Err(Error::Task(format!("prompt_len range [{lo},{hi}] is invalid")));
                }
                if hi - 2 > self.answer_len {
                    return Err(Error::Task("answer_len cannot hold the longest reversal".into()));
                }
                SYMBOL_BASE + 2
            }
            TaskKind::MultiTurnCalc => {
                if self.max_turns == 0 || self.turn_budget < 2 {
                    return Err(Error::Task("multi-turn episodes need turns and a turn budget".into()));
                }
                SYMBOL_BASE + 10
            }
        };
        if self.vocab_size < need {
            return Err(Error::Task(format!(
                "vocabulary of {} tokens is too small, task needs {need}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn n_symbols(&self) -> usize {
        self.vocab_size - SYMBOL_BASE
    }

    /// Longest prompt this spec generates.
    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularSum => 5,
            TaskKind::CopyReverse => self.prompt_len[1],
            TaskKind::MultiTurnCalc => 2 + 3 * digits(self.operand_max) + 2,
        }
    }

    /// Most response tokens (model and tool) an episode can produce.
    pub fn max_response_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularSum | TaskKind::CopyReverse => self.answer_len + 1,
            TaskKind::MultiTurnCalc => self.max_turns * (self.turn_budget + self.answer_len + 3),
        }
    }
}

fn digits(v: usize) -> usize {
    v.to_string().len()
}

/// A generated prompt and its unique correct answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<Token>,
    pub answer: Vec<Token>,
}

fn int_tokens(v: i64) -> Vec<Token> {
    let mut out = Vec::new();
    if v < 0 {
        out.push(MINUS);
    }
    out.extend(v.unsigned_abs().to_string().bytes().map(|b| symbol((b - b'0') as usize)));
    out
}

/// Deterministic prompt set; prompt `i` comes from the stream keyed by
/// `(seed, i)`.
pub fn gen_prompts(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<Prompt>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Task("prompt count must be at least 1".into()));
    }
    (0..count as u64).map(|i| gen_prompt(spec, seed, i)).collect()
}

fn gen_prompt(spec: &TaskSpec, seed: u64, id: u64) -> Result<Prompt> {
    let mut r = rng::stream(seed, Domain::Prompts, &[id]);
    Ok(match spec.kind {
        TaskKind::ModularSum => {
            let hi = spec.operand_max.min(spec.modulus - 1);
            let x = r.random_range(0..=hi);
            let y = r.random_range(0..=hi);
            Prompt {
                id,
                tokens: vec![BOS, symbol(x), PLUS, symbol(y), SEP],
                answer: vec![symbol((x + y) % spec.modulus)],
            }
        }
        TaskKind::CopyReverse => {
            let len = r.random_range(spec.prompt_len[0]..=spec.prompt_len[1]) - 2;
            let syms: Vec<Token> = (0..len).map(|_| symbol(r.random_range(0..spec.n_symbols()))).collect();
            let mut tokens = vec![BOS];
            tokens.extend(&syms);
            tokens.push(SEP);
            Prompt {
                id,
                tokens,
                answer: syms.into_iter().rev().collect(),
            }
        }
        TaskKind::MultiTurnCalc => {
            let ops = [PLUS, MINUS, TIMES];
            let a = r.random_range(0..=spec.operand_max) as i64;
            let b = r.random_range(0..=spec.operand_max) as i64;
            let c = r.random_range(0..=spec.operand_max) as i64;
            let o1 = ops[r.random_range(0..3)];
            let o2 = ops[r.random_range(0..3)];
            let mut expr = int_tokens(a);
            expr.push(o1);
            expr.extend(int_tokens(b));
            expr.push(o2);
            expr.extend(int_tokens(c));
            let value = eval_expression(&expr).expect("generated expression is well-formed");
            let mut tokens = vec![BOS];
            tokens.extend(&expr);
            tokens.push(SEP);
            Prompt {
                id,
                tokens,
                answer: int_tokens(value),
            }
        }
    })
}

/// Evaluates an integer expression over `+ - *` with the usual precedence.
/// Operands are non-negative decimal literals.
pub fn eval_expression(tokens: &[Token]) -> Option<i64> {
    let mut terms: Vec<i64> = Vec::new();
    let mut signs: Vec<i64> = Vec::new();
    let mut i = 0;
    let mut sign = 1;
    loop {
        let mut product: Option<i64> = None;
        loop {
            let start = i;
            let mut v: i64 = 0;
            while i < tokens.len() && (SYMBOL_BASE..SYMBOL_BASE + 10).contains(&tokens[i]) {
                v = v.checked_mul(10)?.checked_add((tokens[i] - SYMBOL_BASE) as i64)?;
                i += 1;
            }
            if i == start {
                return None;
            }
            product = Some(match product {
                None => v,
                Some(p) => p.checked_mul(v)?,
            });
            if i < tokens.len() && tokens[i] == TIMES {
                i += 1;
            } else {
                break;
            }
        }
        terms.push(product?);
        signs.push(sign);
        if i == tokens.len() {
            break;
        }
        sign = match tokens[i] {
            PLUS => 1,
            MINUS => -1,
            _ => return None,
        };
        i += 1;
    }
    terms
        .iter()
        .zip(&signs)
        .try_fold(0i64, |acc, (t, s)| acc.checked_add(t.checked_mul(*s)?))
}

/// Output of the calculator tool for the expression between two
/// `TOOL_CALL` markers.
pub fn step_tool(expression: &[Token]) -> Vec<Token> {
    let mut out = vec![TOOL_RESULT];
    match eval_expression(expression) {
        Some(v) => out.extend(int_tokens(v)),
        None => out.push(ERROR),
    }
    out.push(TOOL_RESULT);
    out
}

/// Whether a response token was produced by the model (and may carry
/// gradient), injected by the tool, or belongs to a void turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenRole {
    Model,
    Tool,
    Void,
}

impl TokenRole {
    pub fn is_model(self) -> bool {
        self == TokenRole::Model
    }
}

/// What the environment expects after a model token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    NeedToken,
    Done,
}

/// Response-side state machine of one episode.
#[derive(Clone, Debug)]
pub struct Episode {
    kind: TaskKind,
    max_tokens: usize,
    max_turns: usize,
    turn_budget: usize,
    pub response: Vec<Token>,
    pub roles: Vec<TokenRole>,
    turn_start: usize,
    turns: usize,
    status: Status,
}

impl Episode {
    /// `max_new` caps model tokens for single-turn tasks.
    pub fn new(spec: &TaskSpec, max_new: usize) -> Self {
        Self {
            kind: spec.kind,
            max_tokens: match spec.kind {
                TaskKind::MultiTurnCalc => spec.max_response_len(),
                _ => max_new,
            },
            max_turns: spec.max_turns,
            turn_budget: spec.turn_budget,
            response: Vec::new(),
            roles: Vec::new(),
            turn_start: 0,
            turns: 0,
            status: if max_new == 0 { Status::Done } else { Status::NeedToken },
        }
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_done(&self) -> bool {
        self.status == Status::Done
    }

    /// Appends a model token; for multi-turn tasks this may close a turn
    /// and append the tool's observation.
    pub fn push(&mut self, token: Token) -> Result<()> {
        if self.is_done() {
            return Err(Error::Task("episode already finished".into()));
        }
        self.response.push(token);
        self.roles.push(TokenRole::Model);
        if self.kind != TaskKind::MultiTurnCalc {
            if token == EOS || self.response.len() >= self.max_tokens {
                self.status = Status::Done;
            }
            return Ok(());
        }
        let turn = &self.response[self.turn_start..];
        let closes_call = token == TOOL_CALL && turn.first() == Some(&TOOL_CALL) && turn.len() >= 2;
        let over_budget = turn.len() >= self.turn_budget;
        if token == EOS || closes_call || over_budget {
            let has_answer = turn.contains(&ANSWER);
            if !closes_call && !has_answer {
                for r in &mut self.roles[self.turn_start..] {
                    *r = TokenRole::Void;
                }
            }
            self.turns += 1;
            if closes_call {
                let expr = self.response[self.turn_start + 1..self.response.len() - 1].to_vec();
                let obs = step_tool(&expr);
                self.roles.extend(std::iter::repeat(TokenRole::Tool).take(obs.len()));
                self.response.extend(obs);
            }
            self.turn_start = self.response.len();
            if token == EOS || self.turns >= self.max_turns {
                self.status = Status::Done;
            }
        }
        if self.response.len() >= self.max_tokens {
            self.status = Status::Done;
        }
        Ok(())
    }
}

/// Binary exact-match reward.
///
/// Single-turn tasks score the tokens before the first EOS; multi-turn
/// episodes score the tokens between the last `ANSWER` and the EOS that
/// follows it. A response truncated at the length limit is scored on
/// everything it emitted.
pub fn verify(spec: &TaskSpec, prompt: &Prompt, response: &[Token]) -> f64 {
    let body = match response.iter().position(|&t| t == EOS) {
        Some(eos) => &response[..eos],
        None => response,
    };
    let answer = match spec.kind {
        TaskKind::MultiTurnCalc => match body.iter().rposition(|&t| t == ANSWER) {
            Some(a) => &body[a + 1..],
            None => return 0.0,
        },
        _ => body,
    };
    if answer.len() > spec.answer_len.max(prompt.answer.len()) {
        return 0.0;
    }
    if answer == prompt.answer.as_slice() {
        1.0
    } else {
        0.0
    }
}

/// One line of a task dataset file.
pub fn prompt_to_json(p: &Prompt) -> Result<String> {
    Ok(serde_json::to_string(p)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_sum_example() {
        let spec = TaskSpec {
            modulus: 7,
            ..TaskSpec::new(TaskKind::ModularSum)
        };
        let p = Prompt {
            id: 0,
            tokens: vec![BOS, symbol(3), PLUS, symbol(6), SEP],
            answer: vec![symbol(2)],
        };
        assert_eq!(verify(&spec, &p, &[symbol(2), EOS]), 1.0);
        assert_eq!(verify(&spec, &p, &[symbol(2)]), 1.0);
        assert_eq!(verify(&spec, &p, &[symbol(2), symbol(2)]), 0.0);
        assert_eq!(verify(&spec, &p, &[]), 0.0);
    }

    #[test]
    fn tool_call_two_plus_three() {
        assert_eq!(step_tool(&[symbol(2), PLUS, symbol(3)]), vec![TOOL_RESULT, symbol(5), TOOL_RESULT]);
        assert_eq!(step_tool(&[PLUS, PLUS]), vec![TOOL_RESULT, ERROR, TOOL_RESULT]);
        assert_eq!(step_tool(&[]), vec![TOOL_RESULT, ERROR, TOOL_RESULT]);
    }

    #[test]
    fn precedence() {
        let e = [symbol(2), PLUS, symbol(3), TIMES, symbol(4), MINUS, symbol(1)];
        assert_eq!(eval_expression(&e), Some(13));
        assert_eq!(eval_expression(&[symbol(1), symbol(2)]), Some(12));
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let spec = TaskSpec {
            vocab_size: 20,
            ..TaskSpec::new(TaskKind::ModularSum)
        };
        assert!(gen_prompts(&spec, 4, 0).is_err());
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(gen_prompts(&TaskSpec::new(TaskKind::CopyReverse), 0, 0).is_err());
    }
}
