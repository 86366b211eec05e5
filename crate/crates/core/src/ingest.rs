//! Document ingestion: heading-structured text and unstructured paragraphs
//! become a [`SemanticTree`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{prefix_within, token_len};
use crate::tree::{validate_tree, NodeId, SemanticTree, TreeNode};

pub const DEFAULT_MAX_LEAF_TOKENS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub max_leaf_tokens: usize,
    /// Minimum paragraphs per depth-1 node in unstructured segmentation.
    /// Short groups are merged with the following paragraphs.
    pub min_paragraphs: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_leaf_tokens: DEFAULT_MAX_LEAF_TOKENS,
            min_paragraphs: 1,
        }
    }
}

impl IngestConfig {
    pub fn with_max_leaf_tokens(max_leaf_tokens: usize) -> Self {
        Self {
            max_leaf_tokens,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.max_leaf_tokens < 8 {
            return Err(Error::Config(format!("max_leaf_tokens must be >= 8, got {}", self.max_leaf_tokens)));
        }
        if self.min_paragraphs == 0 {
            return Err(Error::Config("min_paragraphs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One heading with the text scoped directly under it (before the next heading).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub level: usize,
    pub title: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone)]
pub enum HeadingDoc<'a> {
    /// `#`-depth headings.
    Markdown(&'a str),
    /// Explicit level integers, e.g. parsed from a JSON list of [`Section`]s.
    Levels(Vec<Section>),
}

/// Blank-line separated paragraphs, trimmed, empties dropped.
pub fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n").trim().to_string());
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n").trim().to_string());
    }
    out.retain(|p| !p.is_empty());
    out
}

fn heading_level(line: &str) -> Option<(usize, &str)> {
    let hashes = line.bytes().take_while(|&b| b == b'#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &line[hashes..];
    if !rest.is_empty() && !rest.starts_with(' ') && !rest.starts_with('\t') {
        return None;
    }
    Some((hashes, rest.trim().trim_end_matches('#').trim()))
}

/// Splits markdown into leading text and heading sections.
pub fn parse_markdown(doc: &str) -> (String, Vec<Section>) {
    let mut lead = String::new();
    let mut sections: Vec<Section> = Vec::new();
    for line in doc.lines() {
        if let Some((level, title)) = heading_level(line) {
            sections.push(Section {
                level,
                title: title.to_string(),
                text: String::new(),
            });
        } else {
            let buf = match sections.last_mut() {
                Some(s) => &mut s.text,
                None => &mut lead,
            };
            buf.push_str(line);
            buf.push('\n');
        }
    }
    (lead, sections)
}

/// Greedy fixed-length windows, no overlap; concatenation reproduces `text`.
pub fn chunk_text(text: &str, max_tokens: usize) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let mut piece = prefix_within(rest, max_tokens);
        if piece.is_empty() {
            let first = rest.chars().next().map_or(rest.len(), char::len_utf8);
            piece = &rest[..first];
        }
        out.push(piece);
        rest = &rest[piece.len()..];
    }
    out
}

struct Builder {
    nodes: Vec<TreeNode>,
    max_leaf_tokens: usize,
}

impl Builder {
    fn add(&mut self, title: Option<String>, text: String, parent: Option<NodeId>, depth: usize) -> NodeId {
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(TreeNode {
            id,
            title,
            text,
            parent,
            children: Vec::new(),
            depth,
        });
        if let Some(p) = parent {
            self.nodes[p.0 as usize].children.push(id);
        }
        id
    }

    /// A leaf, or an empty-text node over chunk leaves when the text is too long.
    fn add_paragraph(&mut self, text: &str, parent: NodeId, depth: usize) {
        if token_len(text) <= self.max_leaf_tokens {
            self.add(None, text.to_string(), Some(parent), depth);
            return;
        }
        let holder = self.add(None, String::new(), Some(parent), depth);
        for piece in chunk_text(text, self.max_leaf_tokens) {
            self.add(None, piece.to_string(), Some(holder), depth + 1);
        }
    }

    fn finish(self) -> Result<SemanticTree> {
        let tree = SemanticTree::from_nodes(self.nodes, NodeId(0), self.max_leaf_tokens);
        validate_tree(&tree).into_result()?;
        Ok(tree)
    }
}

struct SectionNode {
    title: Option<String>,
    paragraphs: Vec<String>,
    children: Vec<usize>,
}

fn emit(b: &mut Builder, secs: &[SectionNode], idx: usize, parent: Option<NodeId>, depth: usize) -> Result<()> {
    let sec = &secs[idx];
    let title = sec.title.clone().unwrap_or_default();
    if token_len(&title) > b.max_leaf_tokens {
        return Err(Error::InvalidTree(format!(
            "heading {title:?} alone exceeds {} tokens",
            b.max_leaf_tokens
        )));
    }
    let mut leaf_paragraphs: &[String] = &sec.paragraphs;
    let mut text = title.clone();
    if !sec.children.is_empty() && !sec.paragraphs.is_empty() {
        // Paragraphs before the first subheading act as the section's own context.
        let mut joined = title.clone();
        for p in &sec.paragraphs {
            if !joined.is_empty() {
                joined.push_str("\n\n");
            }
            joined.push_str(p);
        }
        if token_len(&joined) <= b.max_leaf_tokens {
            text = joined;
            leaf_paragraphs = &[];
        }
    }
    if sec.children.is_empty() && sec.paragraphs.is_empty() && text.is_empty() {
        return Ok(());
    }
    let id = b.add(sec.title.clone(), text, parent, depth);
    for p in leaf_paragraphs {
        b.add_paragraph(p, id, depth + 1);
    }
    for &c in &sec.children {
        emit(b, secs, c, Some(id), depth + 1)?;
    }
    Ok(())
}

/// Headings become internal nodes, the paragraphs scoped under them become leaves.
pub fn build_tree_from_headings(doc: HeadingDoc<'_>, config: &IngestConfig) -> Result<SemanticTree> {
    config.check()?;
    let (lead, sections) = match doc {
        HeadingDoc::Markdown(s) => parse_markdown(s),
        HeadingDoc::Levels(v) => (String::new(), v),
    };
    let lead = paragraphs(&lead);
    if lead.is_empty() && sections.is_empty() {
        return Err(Error::EmptyDocument);
    }

    let mut previous = 0;
    for s in &sections {
        if s.level == 0 || s.level > previous + 1 {
            return Err(Error::HeadingNesting {
                heading: s.title.clone(),
                level: s.level,
                previous,
            });
        }
        previous = s.level;
    }

    let top_level = sections.iter().filter(|s| s.level == 1).count();
    let synthetic_root = !lead.is_empty() || top_level != 1;

    // Section 0 is the (possibly synthetic) level-0 container.
    let mut secs = vec![SectionNode {
        title: None,
        paragraphs: lead,
        children: Vec::new(),
    }];
    let mut open: Vec<(usize, usize)> = vec![(0, 0)];
    for s in &sections {
        while open.last().is_some_and(|&(lvl, _)| lvl >= s.level) {
            open.pop();
        }
        let parent = open.last().expect("level-0 container stays open").1;
        let idx = secs.len();
        secs.push(SectionNode {
            title: Some(s.title.clone()),
            paragraphs: paragraphs(&s.text),
            children: Vec::new(),
        });
        secs[parent].children.push(idx);
        open.push((s.level, idx));
    }

    let mut b = Builder {
        nodes: Vec::new(),
        max_leaf_tokens: config.max_leaf_tokens,
    };
    if synthetic_root {
        emit(&mut b, &secs, 0, None, 0)?;
    } else {
        emit(&mut b, &secs, secs[0].children[0], None, 0)?;
    }
    if b.nodes.is_empty() {
        return Err(Error::EmptyDocument);
    }
    b.finish()
}

/// Paragraphs become depth-1 nodes under an empty root; long paragraphs are chunked.
pub fn segment_unstructured(text: &str, max_tokens: usize) -> Result<SemanticTree> {
    segment_unstructured_with(text, &IngestConfig::with_max_leaf_tokens(max_tokens))
}

pub fn segment_unstructured_with(text: &str, config: &IngestConfig) -> Result<SemanticTree> {
    config.check()?;
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("whitespace-only text"));
    }
    let paras = paragraphs(text);

    let mut groups: Vec<Vec<String>> = Vec::new();
    for p in paras {
        match groups.last_mut() {
            Some(g) if g.len() < config.min_paragraphs => g.push(p),
            _ => groups.push(vec![p]),
        }
    }
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < config.min_paragraphs) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }

    let mut b = Builder {
        nodes: Vec::new(),
        max_leaf_tokens: config.max_leaf_tokens,
    };
    let root = b.add(None, String::new(), None, 0);
    for g in groups {
        b.add_paragraph(&g.join("\n\n"), root, 1);
    }
    b.finish()
}

/// Replaces leaves longer than the tree's limit with an empty-text node over chunk leaves.
/// New ids are appended after the current maximum so existing ids stay stable.
pub fn split_oversized_leaves(tree: &mut SemanticTree) {
    let max = tree.max_leaf_tokens();
    let oversized: Vec<NodeId> = tree.leaves().filter(|n| n.token_len() > max).map(|n| n.id).collect();
    for id in oversized {
        let (text, depth) = {
            let n = tree.node_mut(id).expect("leaf exists");
            (std::mem::take(&mut n.text), n.depth)
        };
        let mut kids = Vec::new();
        for piece in chunk_text(&text, max) {
            let cid = tree.next_id();
            tree.insert(TreeNode {
                id: cid,
                title: None,
                text: piece.to_string(),
                parent: Some(id),
                children: Vec::new(),
                depth: depth + 1,
            });
            kids.push(cid);
        }
        tree.node_mut(id).expect("leaf exists").children = kids;
    }
}
