//! Per-column prefix trees over the token spellings of valid values.
//!
//! Under level tokenization each trie is a root with one terminal child per
//! level. Under byte tokenization values share prefixes. A terminal node
//! offers the column's END token in its valid set.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::sentence::{Vocabulary, IGNORE};
use crate::table::Discretizer;

#[derive(Debug, Clone)]
struct Node {
    children: Vec<(u32, usize)>,
    level: Option<usize>,
    /// Child edges, plus END when terminal; sorted.
    valid: Vec<u32>,
}

#[derive(Debug, Clone)]
struct ColumnTrie {
    nodes: Vec<Node>,
    end: u32,
    leaves: usize,
}

impl ColumnTrie {
    fn new(end: u32) -> Self {
        ColumnTrie {
            nodes: vec![Node {
                children: Vec::new(),
                level: None,
                valid: Vec::new(),
            }],
            end,
            leaves: 0,
        }
    }

    fn insert(&mut self, tokens: &[u32], level: usize) -> Result<()> {
        let mut node = 0;
        for &tok in tokens {
            node = match self.nodes[node].children.iter().find(|(t, _)| *t == tok) {
                Some(&(_, child)) => child,
                None => {
                    let child = self.nodes.len();
                    self.nodes.push(Node {
                        children: Vec::new(),
                        level: None,
                        valid: Vec::new(),
                    });
                    self.nodes[node].children.push((tok, child));
                    child
                }
            };
        }
        if self.nodes[node].level.replace(level).is_some() {
            return Err(Error::Trie(format!("duplicate token spelling {tokens:?}")));
        }
        self.leaves += 1;
        Ok(())
    }

    fn finish(&mut self) {
        let end = self.end;
        for node in &mut self.nodes {
            node.children.sort_unstable();
            node.valid = node.children.iter().map(|&(t, _)| t).collect();
            if node.level.is_some() {
                node.valid.push(end);
            }
            node.valid.sort_unstable();
        }
    }

    fn depth(&self, node: usize) -> usize {
        self.nodes[node]
            .children
            .iter()
            .map(|&(_, c)| 1 + self.depth(c))
            .max()
            .unwrap_or(0)
    }
}

/// Position inside one column's trie.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrieCursor {
    pub column: usize,
    node: usize,
    pub consumed: usize,
}

/// Outcome of feeding one token to a cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advance {
    Child(TrieCursor),
    /// END was consumed at a terminal node holding `level`.
    Closed { column: usize, level: usize },
}

#[derive(Debug, Clone)]
pub struct ColumnTrieSet {
    tries: Vec<ColumnTrie>,
}

impl ColumnTrieSet {
    pub fn build(vocab: &Vocabulary, disc: &Discretizer) -> Result<Self> {
        if vocab.cardinalities() != disc.cardinalities().as_slice() {
            return Err(Error::Trie("vocabulary and discretizer disagree on cardinalities".into()));
        }
        let tries = (0..vocab.num_columns())
            .map(|j| {
                let mut trie = ColumnTrie::new(vocab.end(j));
                for level in 0..vocab.cardinalities()[j] {
                    trie.insert(&vocab.value_tokens(disc, j, level), level)
                        .map_err(|e| Error::Trie(format!("column `{}`: {e}", disc.columns[j].name)))?;
                }
                trie.finish();
                Ok(trie)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnTrieSet { tries })
    }

    pub fn num_columns(&self) -> usize {
        self.tries.len()
    }

    pub fn root(&self, column: usize) -> TrieCursor {
        TrieCursor {
            column,
            node: 0,
            consumed: 0,
        }
    }

    pub fn leaf_count(&self, column: usize) -> usize {
        self.tries[column].leaves
    }

    pub fn depth(&self, column: usize) -> usize {
        self.tries[column].depth(0)
    }

    pub fn is_terminal(&self, cursor: TrieCursor) -> bool {
        self.tries[cursor.column].nodes[cursor.node].level.is_some()
    }

    /// Tokens allowed next: child edges, plus END at a terminal node.
    pub fn valid_tokens(&self, cursor: TrieCursor) -> &[u32] {
        &self.tries[cursor.column].nodes[cursor.node].valid
    }

    pub fn advance(&self, cursor: TrieCursor, token: u32) -> Result<Advance> {
        let trie = &self.tries[cursor.column];
        let node = &trie.nodes[cursor.node];
        if token == trie.end {
            if let Some(level) = node.level {
                return Ok(Advance::Closed {
                    column: cursor.column,
                    level,
                });
            }
        } else if let Ok(i) = node.children.binary_search_by_key(&token, |&(t, _)| t) {
            return Ok(Advance::Child(TrieCursor {
                column: cursor.column,
                node: node.children[i].1,
                consumed: cursor.consumed + 1,
            }));
        }
        Err(Error::Trie(format!(
            "token {token} not valid in column {} after {} tokens",
            cursor.column, cursor.consumed
        )))
    }

    /// Valid-token sets for every predicted position of a teacher-forced
    /// sentence; `None` at IGNORE positions.
    pub fn guide<'a>(
        &'a self,
        vocab: &Vocabulary,
        inputs: &[u32],
        targets: &[u32],
    ) -> Result<Vec<Option<&'a [u32]>>> {
        let mut cursor: Option<TrieCursor> = None;
        let mut out = Vec::with_capacity(inputs.len());
        for (&input, &target) in inputs.iter().zip(targets) {
            cursor = if vocab.is_begin(input) {
                Some(self.root(input as usize))
            } else if vocab.is_end(input) {
                None
            } else {
                let c = cursor.ok_or_else(|| Error::Trie(format!("value token {input} outside a column block")))?;
                match self.advance(c, input)? {
                    Advance::Child(next) => Some(next),
                    Advance::Closed { .. } => unreachable!("END handled above"),
                }
            };
            if target == IGNORE {
                out.push(None);
                continue;
            }
            let c = cursor.ok_or_else(|| Error::Trie(format!("target {target} outside a column block")))?;
            let valid = self.valid_tokens(c);
            if valid.binary_search(&target).is_err() {
                return Err(Error::Trie(format!(
                    "target {target} is not a valid continuation in column {}",
                    c.column
                )));
            }
            out.push(Some(valid));
        }
        Ok(out)
    }
}

/// Walks a whole row: one trie cursor at a time, in a fixed column order.
#[derive(Debug, Clone)]
pub struct RowWalker {
    order: Vec<usize>,
    index: usize,
    cursor: TrieCursor,
    levels: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkState {
    /// Still inside the current column.
    Within,
    /// Moved to the root of the next column; its BEGIN token must be fed.
    NextColumn(usize),
    Finished,
}

impl RowWalker {
    pub fn new(tries: &ColumnTrieSet, order: Vec<usize>) -> Self {
        let first = order[0];
        RowWalker {
            levels: vec![None; tries.num_columns()],
            cursor: tries.root(first),
            order,
            index: 0,
        }
    }

    pub fn cursor(&self) -> TrieCursor {
        self.cursor
    }

    pub fn advance(&mut self, tries: &ColumnTrieSet, token: u32) -> Result<WalkState> {
        match tries.advance(self.cursor, token)? {
            Advance::Child(next) => {
                self.cursor = next;
                Ok(WalkState::Within)
            }
            Advance::Closed { column, level } => {
                self.levels[column] = Some(level);
                self.index += 1;
                match self.order.get(self.index) {
                    Some(&next) => {
                        self.cursor = tries.root(next);
                        Ok(WalkState::NextColumn(next))
                    }
                    None => Ok(WalkState::Finished),
                }
            }
        }
    }

    /// Levels collected so far; complete once the walk has finished.
    pub fn levels(&self) -> Option<Vec<usize>> {
        self.levels.iter().copied().collect()
    }
}

/// Scores outside `valid` become the most negative finite value, so a
/// subtract-max softmax gives them probability exactly zero.
pub fn mask_logits<T: Float>(logits: &[T], valid: &[u32]) -> Result<Vec<T>> {
    if valid.is_empty() {
        return Err(Error::Trie("empty valid-token set".into()));
    }
    let mut out = vec![T::min_value(); logits.len()];
    for &t in valid {
        let t = t as usize;
        if t >= logits.len() {
            return Err(Error::TokenOutOfRange {
                token: t as u32,
                vocab: logits.len(),
            });
        }
        out[t] = logits[t];
    }
    Ok(out)
}
