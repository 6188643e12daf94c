//! Prompt construction and item-membership annotations.
//!
//! A prompt is the token sequence fed to the model for one history of items.
//! Every position carries an [`Annotation`] recording whether it belongs to an
//! item title, which history slot it belongs to, and whether it closes its
//! title. All attention masks are derived from these annotations alone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;
pub type ItemId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentationError {
    #[error("item {0} is not in the catalog")]
    CatalogMiss(ItemId),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("position {index} out of range for prompt of length {len}")]
    OutOfBounds { index: usize, len: usize },
}

/// Words reserved at the start of every vocabulary for the prompt template.
pub const HISTORY_WORD: &str = "<hist>";
pub const SEPARATOR_WORD: &str = ",";
pub const READOUT_WORD: &str = "<next>";

/// Dataset-local whitespace vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary with the template words already interned as ids 0, 1, 2.
    pub fn with_template_words() -> Self {
        let mut vocab = Self::new();
        for w in [HISTORY_WORD, SEPARATOR_WORD, READOUT_WORD] {
            vocab.intern(w);
        }
        vocab
    }

    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as TokenId;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Splits `text` on whitespace and interns every word.
    pub fn tokenize(&mut self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.intern(w)).collect()
    }
}

/// Item titles as token-id sequences, indexed by dense item id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemCatalog {
    titles: Vec<Vec<TokenId>>,
    vocab_size: usize,
}

impl ItemCatalog {
    pub fn new(titles: Vec<Vec<TokenId>>, vocab_size: usize) -> Result<Self, SegmentationError> {
        for (item, title) in titles.iter().enumerate() {
            if title.is_empty() {
                return Err(SegmentationError::InvalidInput(format!(
                    "item {item} has an empty title"
                )));
            }
            if let Some(&t) = title.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(SegmentationError::InvalidInput(format!(
                    "item {item} uses token {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(Self { titles, vocab_size })
    }

    /// Tokenizes raw title strings (indexed by dense item id) into a fresh
    /// vocabulary that starts with the template words.
    pub fn from_title_strings<S: AsRef<str>>(
        titles: &[S],
    ) -> Result<(Self, Vocabulary), SegmentationError> {
        let mut vocab = Vocabulary::with_template_words();
        let tokenized: Vec<Vec<TokenId>> =
            titles.iter().map(|t| vocab.tokenize(t.as_ref())).collect();
        let catalog = Self::new(tokenized, vocab.len())?;
        Ok((catalog, vocab))
    }

    pub fn n_items(&self) -> usize {
        self.titles.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn title(&self, item: ItemId) -> Option<&[TokenId]> {
        self.titles.get(item).map(Vec::as_slice)
    }
}

/// Non-item tokens wrapped around the item titles.
///
/// Layout: `prefix, title_0, sep, title_1, sep, ..., title_last, suffix`.
/// The last suffix token is the read-out position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: Vec<TokenId>,
    pub separator: Option<TokenId>,
    pub suffix: Vec<TokenId>,
}

impl PromptTemplate {
    /// `<hist> title , title , ... title <next>` using the ids reserved by
    /// [`Vocabulary::with_template_words`].
    pub fn standard() -> Self {
        Self {
            prefix: vec![0],
            separator: Some(1),
            suffix: vec![2],
        }
    }

    /// Number of prompt positions for titles of the given lengths.
    pub fn prompt_len(&self, title_lens: impl IntoIterator<Item = usize>) -> usize {
        let mut n_items: usize = 0;
        let mut tokens = 0;
        for len in title_lens {
            n_items += 1;
            tokens += len;
        }
        let seps = if self.separator.is_some() {
            n_items.saturating_sub(1)
        } else {
            0
        };
        self.prefix.len() + tokens + seps + self.suffix.len()
    }
}

/// Per-position membership record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Annotation {
    /// History slot this token belongs to, if it is an item token.
    pub item_index: Option<usize>,
    pub is_item_token: bool,
    pub is_last_of_item: bool,
}

impl Annotation {
    pub const NON_ITEM: Annotation = Annotation {
        item_index: None,
        is_item_token: false,
        is_last_of_item: false,
    };

    pub fn item(slot: usize, last: bool) -> Self {
        Self {
            item_index: Some(slot),
            is_item_token: true,
            is_last_of_item: last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    tokens: Vec<TokenId>,
    annotations: Vec<Annotation>,
    readout_position: usize,
}

impl TokenizedPrompt {
    /// Builds a prompt directly from tokens and annotations, checking every
    /// structural invariant.
    pub fn from_parts(
        tokens: Vec<TokenId>,
        annotations: Vec<Annotation>,
    ) -> Result<Self, SegmentationError> {
        if tokens.is_empty() || tokens.len() != annotations.len() {
            return Err(SegmentationError::InvalidInput(format!(
                "{} tokens with {} annotations",
                tokens.len(),
                annotations.len()
            )));
        }
        let readout_position = tokens.len() - 1;
        if annotations[readout_position].is_item_token {
            return Err(SegmentationError::InvalidInput(
                "read-out position must not be an item token".into(),
            ));
        }
        let mut last_slot: Option<usize> = None;
        let mut closed: Vec<usize> = Vec::new();
        let mut open = false;
        for (pos, a) in annotations.iter().enumerate() {
            if a.is_item_token != a.item_index.is_some() || (a.is_last_of_item && !a.is_item_token)
            {
                return Err(SegmentationError::InvalidInput(format!(
                    "inconsistent annotation at position {pos}"
                )));
            }
            match a.item_index {
                Some(slot) => {
                    let continuing = open && last_slot == Some(slot);
                    if !continuing && (open || closed.contains(&slot)) {
                        return Err(SegmentationError::InvalidInput(format!(
                            "slot {slot} is not contiguous or not closed at position {pos}"
                        )));
                    }
                    last_slot = Some(slot);
                    open = !a.is_last_of_item;
                    if a.is_last_of_item {
                        closed.push(slot);
                    }
                }
                None if open => {
                    return Err(SegmentationError::InvalidInput(format!(
                        "item span interrupted at position {pos}"
                    )));
                }
                None => {}
            }
        }
        if open {
            return Err(SegmentationError::InvalidInput(
                "final item span has no last token".into(),
            ));
        }
        Ok(Self {
            tokens,
            annotations,
            readout_position,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn readout_position(&self) -> usize {
        self.readout_position
    }

    /// Number of history slots present.
    pub fn n_items(&self) -> usize {
        self.annotations
            .iter()
            .filter(|a| a.is_last_of_item)
            .count()
    }

    fn annotation(&self, j: usize) -> Result<&Annotation, SegmentationError> {
        self.annotations
            .get(j)
            .ok_or(SegmentationError::OutOfBounds {
                index: j,
                len: self.annotations.len(),
            })
    }

    /// F(j).
    pub fn is_item_token(&self, j: usize) -> Result<bool, SegmentationError> {
        Ok(self.annotation(j)?.is_item_token)
    }

    /// L(j).
    pub fn is_last_token(&self, j: usize) -> Result<bool, SegmentationError> {
        Ok(self.annotation(j)?.is_last_of_item)
    }

    /// B(j, k): both positions are item tokens of the same history slot.
    pub fn same_item(&self, j: usize, k: usize) -> Result<bool, SegmentationError> {
        let (a, b) = (self.annotation(j)?, self.annotation(k)?);
        Ok(a.is_item_token && b.is_item_token && a.item_index == b.item_index)
    }

    /// Contiguous `(start, end_exclusive)` token span of every history slot.
    pub fn item_spans(&self) -> Vec<(usize, usize)> {
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (pos, a) in self.annotations.iter().enumerate() {
            if let Some(slot) = a.item_index {
                if spans.len() == slot {
                    spans.push((pos, pos + 1));
                } else {
                    spans[slot].1 = pos + 1;
                }
            }
        }
        spans
    }
}

/// Lays out `history` inside `template`, annotating every title span with its
/// history slot.
pub fn tokenize_prompt(
    history: &[ItemId],
    catalog: &ItemCatalog,
    template: &PromptTemplate,
) -> Result<TokenizedPrompt, SegmentationError> {
    if history.is_empty() {
        return Err(SegmentationError::InvalidInput("empty history".into()));
    }
    if template.suffix.is_empty() {
        return Err(SegmentationError::InvalidInput(
            "template needs at least one suffix token for the read-out".into(),
        ));
    }
    let titles = history
        .iter()
        .map(|&item| {
            catalog
                .title(item)
                .ok_or(SegmentationError::CatalogMiss(item))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = template.prompt_len(titles.iter().map(|t| t.len()));
    let mut tokens = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let push_plain = |tokens: &mut Vec<TokenId>, annotations: &mut Vec<Annotation>, t| {
        tokens.push(t);
        annotations.push(Annotation::NON_ITEM);
    };

    for &t in &template.prefix {
        push_plain(&mut tokens, &mut annotations, t);
    }
    for (slot, title) in titles.iter().enumerate() {
        if slot > 0 {
            if let Some(sep) = template.separator {
                push_plain(&mut tokens, &mut annotations, sep);
            }
        }
        for (i, &t) in title.iter().enumerate() {
            tokens.push(t);
            annotations.push(Annotation::item(slot, i + 1 == title.len()));
        }
    }
    for &t in &template.suffix {
        push_plain(&mut tokens, &mut annotations, t);
    }
    debug_assert_eq!(tokens.len(), n);

    Ok(TokenizedPrompt {
        readout_position: tokens.len() - 1,
        tokens,
        annotations,
    })
}
