use crate::error::{Error, Result};

/// Id layout shared by the CTC head, the decoder, and the tokenizer.
///
/// ```text
/// 0            blank (CTC only)
/// 1..=n        transcript symbols
/// n+1          <sos>
/// n+2          <eos>
/// n+3          <aud>
/// ```
///
/// Both output heads have `n + 1` classes. For the CTC head class 0 is blank;
/// for the decoder class 0 is `<eos>`. Symbol classes coincide with token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    n_symbols: usize,
}

pub const BLANK: usize = 0;

impl Vocab {
    pub fn new(n_symbols: usize) -> Result<Self> {
        if n_symbols == 0 {
            return Err(Error::InvalidConfig("vocabulary must not be empty".into()));
        }
        Ok(Self { n_symbols })
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn sos(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn eos(&self) -> usize {
        self.n_symbols + 2
    }

    pub fn aud(&self) -> usize {
        self.n_symbols + 3
    }

    /// Rows of the decoder embedding table.
    pub fn n_ids(&self) -> usize {
        self.n_symbols + 4
    }

    /// Classes of either output head.
    pub fn n_classes(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn is_symbol(&self, id: usize) -> bool {
        (1..=self.n_symbols).contains(&id)
    }

    /// Decoder output class for a token id (`<eos>` or a symbol).
    pub fn class_of(&self, token: usize) -> Result<usize> {
        if token == self.eos() {
            Ok(0)
        } else if self.is_symbol(token) {
            Ok(token)
        } else {
            Err(Error::InvalidTokens(format!("token {token} is not an output token")))
        }
    }

    pub fn token_of_class(&self, class: usize) -> usize {
        if class == 0 {
            self.eos()
        } else {
            class
        }
    }

    /// Checks that `body` holds symbols only.
    pub fn check_body(&self, body: &[usize]) -> Result<()> {
        match body.iter().find(|&&t| !self.is_symbol(t)) {
            Some(t) => Err(Error::InvalidTokens(format!(
                "token {t} is not a transcript symbol"
            ))),
            None => Ok(()),
        }
    }

    /// Splits `[<sos>, y1, …]` into its body, checking the leading `<sos>`.
    pub fn strip_sos<'a>(&self, prefix: &'a [usize]) -> Result<&'a [usize]> {
        match prefix.split_first() {
            Some((&first, rest)) if first == self.sos() => {
                self.check_body(rest)?;
                Ok(rest)
            }
            _ => Err(Error::InvalidTokens("prefix must begin with <sos>".into())),
        }
    }
}
