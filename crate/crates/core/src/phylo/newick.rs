//! Newick reader. Every non-root node must carry a branch length; the root
//! may carry one, which is ignored. `[...]` comments are skipped and labels
//! may be single-quoted (with `''` as an escaped quote).

use crate::error::{Error, Result};
use crate::phylo::{NodeId, PTree, TreeBuilder};

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    builder: TreeBuilder,
}

const DELIMS: &[u8] = b"():;,[]'";

pub fn parse_newick(text: &str) -> Result<PTree> {
    let mut p = Parser {
        src: text,
        pos: 0,
        builder: TreeBuilder::default(),
    };
    let root = p.subtree(None)?;
    p.skip_ws()?;
    if p.peek() == Some(b':') {
        p.pos += 1;
        p.length()?;
        p.skip_ws()?;
    }
    p.expect(b';')?;
    p.skip_ws()?;
    if p.pos < p.src.len() {
        return Err(p.syntax("trailing characters after ';'"));
    }
    p.builder.set_length(root, 0.0);
    p.builder.build()
}

impl Parser<'_> {
    fn bytes(&self) -> &[u8] {
        self.src.as_bytes()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes().get(self.pos).copied()
    }

    fn syntax(&self, msg: impl Into<String>) -> Error {
        Error::NewickSyntax {
            position: self.pos,
            message: msg.into(),
        }
    }

    fn skip_ws(&mut self) -> Result<()> {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    match self.src[self.pos..].find(']') {
                        Some(off) => self.pos += off + 1,
                        None => {
                            self.pos = start;
                            return Err(self.syntax("unterminated comment"));
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws()?;
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            let found = match self.peek() {
                Some(f) => format!("'{}'", f as char),
                None => "end of input".into(),
            };
            Err(self.syntax(format!("expected '{}', found {found}", c as char)))
        }
    }

    fn subtree(&mut self, parent: Option<NodeId>) -> Result<NodeId> {
        self.skip_ws()?;
        let start = self.pos;
        let id = self.builder.add(parent, None, f64::NAN);
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree(Some(id))?;
                self.skip_ws()?;
                if self.peek() != Some(b':') {
                    return Err(Error::NewickFormat {
                        position: self.pos,
                        message: "missing branch length".into(),
                    });
                }
                self.pos += 1;
                let len = self.length()?;
                self.builder.set_length(child, len);
                self.skip_ws()?;
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.syntax("expected ',' or ')'")),
                }
            }
            let label = self.label()?;
            self.builder.set_name(id, label);
            let n = self.builder.children(id).len();
            if n != 2 {
                return Err(Error::TreeStructure(format!(
                    "node starting at byte {start} has {n} children; only bifurcating trees are supported"
                )));
            }
        } else {
            let label = self.label()?;
            if label.is_none() {
                return Err(self.syntax("expected a leaf label or '('"));
            }
            self.builder.set_name(id, label);
        }
        Ok(id)
    }

    fn label(&mut self) -> Result<Option<String>> {
        self.skip_ws()?;
        if self.peek() == Some(b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = String::new();
            loop {
                match self.src[self.pos..].find('\'') {
                    Some(off) => {
                        out.push_str(&self.src[self.pos..self.pos + off]);
                        self.pos += off + 1;
                        if self.peek() == Some(b'\'') {
                            out.push('\'');
                            self.pos += 1;
                        } else {
                            return Ok(Some(out));
                        }
                    }
                    None => {
                        self.pos = start;
                        return Err(self.syntax("unterminated quoted label"));
                    }
                }
            }
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if DELIMS.contains(&c) || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Ok(None);
        }
        // unquoted underscores stand for blanks
        Ok(Some(self.src[start..self.pos].replace('_', " ")))
    }

    fn length(&mut self) -> Result<f64> {
        self.skip_ws()?;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = &self.src[start..self.pos];
        if text.is_empty() {
            return Err(Error::NewickFormat {
                position: start,
                message: "missing branch length after ':'".into(),
            });
        }
        let v: f64 = text.parse().map_err(|_| Error::NewickFormat {
            position: start,
            message: format!("invalid branch length {text:?}"),
        })?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::NewickFormat {
                position: start,
                message: format!("branch length must be nonnegative and finite, got {v}"),
            });
        }
        Ok(v)
    }
}
