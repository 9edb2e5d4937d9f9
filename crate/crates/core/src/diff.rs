//! Unified diff parsing, strict hunk application and diff generation.
//!
//! The accepted format is the one produced by `git diff` and `diff -u`:
//! optional `diff --git` headers with extended header lines, `---`/`+++`
//! file headers (with `a/`/`b/` prefixes stripped and `/dev/null` meaning
//! absent), `@@ -a,b +c,d @@` hunk headers and ` `/`-`/`+` body lines with
//! `\ No newline at end of file` markers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path};

use similar::{Algorithm, DiffTag};
use thiserror::Error;
use walkdir::WalkDir;

const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";
const CONTEXT_LINES: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: malformed hunk header `{text}`")]
    BadHunkHeader { line: usize, text: String },
    #[error("line {line}: hunk found before any file header")]
    HunkWithoutFile { line: usize },
    #[error("line {line}: unexpected line inside hunk `{text}`")]
    BadHunkLine { line: usize, text: String },
    #[error("line {line}: hunk body ended early ({old} old and {new} new lines missing)")]
    TruncatedHunk { line: usize, old: usize, new: usize },
    #[error("line {line}: unsafe path `{path}`")]
    UnsafePath { line: usize, path: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error(transparent)]
    Malformed(#[from] ParseError),
    #[error("{path}: hunk {hunk} does not match the file contents")]
    HunkMismatch { path: String, hunk: usize },
    #[error("{path}: file to patch does not exist")]
    MissingFile { path: String },
    #[error("{path}: file to create already exists")]
    AlreadyExists { path: String },
    #[error("{path}: binary patches are not supported")]
    Binary { path: String },
    #[error("{path}: file is not valid UTF-8")]
    NotText { path: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Removed(String),
    Added(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
    /// The last old-side line of this hunk has no trailing newline.
    pub old_missing_newline: bool,
    /// The last new-side line of this hunk has no trailing newline.
    pub new_missing_newline: bool,
}

impl Hunk {
    fn old_lines(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Removed(s) => Some(s.as_str()),
                HunkLine::Added(_) => None,
            })
            .collect()
    }

    fn new_lines(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Added(s) => Some(s.as_str()),
                HunkLine::Removed(_) => None,
            })
            .collect()
    }

    fn leading_context(&self) -> usize {
        self.lines
            .iter()
            .take_while(|l| matches!(l, HunkLine::Context(_)))
            .count()
    }

    fn trailing_context(&self) -> usize {
        self.lines
            .iter()
            .rev()
            .take_while(|l| matches!(l, HunkLine::Context(_)))
            .count()
    }

    /// Added plus removed lines.
    pub fn edited_lines(&self) -> usize {
        self.lines
            .iter()
            .filter(|l| !matches!(l, HunkLine::Context(_)))
            .count()
    }
}

/// One file section of a patch. `old_path == None` creates the file,
/// `new_path == None` deletes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
    pub binary: bool,
}

impl FilePatch {
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }

    pub fn is_creation(&self) -> bool {
        self.old_path.is_none()
    }

    pub fn is_deletion(&self) -> bool {
        self.new_path.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Patch {
    pub files: Vec<FilePatch>,
}

impl Patch {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Parser::new(text).run()
    }

    pub fn hunk_count(&self) -> usize {
        self.files.iter().map(|f| f.hunks.len()).sum()
    }

    pub fn edited_lines(&self) -> usize {
        self.files
            .iter()
            .flat_map(|f| &f.hunks)
            .map(Hunk::edited_lines)
            .sum()
    }

    /// Paths touched by the patch, in patch order, without duplicates.
    pub fn paths(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.files {
            let p = f.path().to_string();
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
    files: Vec<FilePatch>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Self {
            lines,
            pos: 0,
            files: Vec::new(),
        }
    }

    fn run(mut self) -> Result<Patch, ParseError> {
        // `git diff` sections may omit ---/+++ (mode-only or empty new file).
        let mut git_section_open = false;
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos];
            let lineno = self.pos + 1;
            if let Some(rest) = line.strip_prefix("diff --git ") {
                let (old, new) = split_git_paths(rest);
                self.files.push(FilePatch {
                    old_path: Some(clean_path(old, lineno)?),
                    new_path: Some(clean_path(new, lineno)?),
                    hunks: Vec::new(),
                    binary: false,
                });
                git_section_open = true;
                self.pos += 1;
            } else if line.starts_with("new file mode") && git_section_open {
                self.files.last_mut().expect("open section").old_path = None;
                self.pos += 1;
            } else if line.starts_with("deleted file mode") && git_section_open {
                self.files.last_mut().expect("open section").new_path = None;
                self.pos += 1;
            } else if line.starts_with("Binary files ") || line == "GIT binary patch" {
                if let Some(f) = self.files.last_mut().filter(|_| git_section_open) {
                    f.binary = true;
                }
                self.pos += 1;
            } else if line.starts_with("--- ")
                && self
                    .lines
                    .get(self.pos + 1)
                    .is_some_and(|n| n.starts_with("+++ "))
            {
                let old = header_path(&line[4..], lineno)?;
                let new = header_path(&self.lines[self.pos + 1][4..], lineno + 1)?;
                if git_section_open {
                    let f = self.files.last_mut().expect("open section");
                    f.old_path = old;
                    f.new_path = new;
                } else {
                    self.files.push(FilePatch {
                        old_path: old,
                        new_path: new,
                        hunks: Vec::new(),
                        binary: false,
                    });
                }
                git_section_open = false;
                self.pos += 2;
            } else if line.starts_with("@@") {
                if self.files.is_empty() {
                    return Err(ParseError::HunkWithoutFile { line: lineno });
                }
                git_section_open = false;
                let hunk = self.hunk()?;
                self.files.last_mut().expect("file").hunks.push(hunk);
            } else {
                // Preamble, extended headers (index, mode, similarity) and trailers.
                self.pos += 1;
            }
        }
        Ok(Patch { files: self.files })
    }

    fn hunk(&mut self) -> Result<Hunk, ParseError> {
        let header = self.lines[self.pos];
        let lineno = self.pos + 1;
        let (old_start, old_len, new_start, new_len) =
            parse_hunk_header(header).ok_or_else(|| ParseError::BadHunkHeader {
                line: lineno,
                text: header.to_string(),
            })?;
        self.pos += 1;
        let mut hunk = Hunk {
            old_start,
            old_len,
            new_start,
            new_len,
            lines: Vec::new(),
            old_missing_newline: false,
            new_missing_newline: false,
        };
        let (mut old_left, mut new_left) = (old_len, new_len);
        while old_left > 0 || new_left > 0 {
            let Some(&line) = self.lines.get(self.pos) else {
                return Err(ParseError::TruncatedHunk {
                    line: self.pos,
                    old: old_left,
                    new: new_left,
                });
            };
            let bad = || ParseError::BadHunkLine {
                line: self.pos + 1,
                text: line.to_string(),
            };
            match line.as_bytes().first() {
                Some(b' ') | None => {
                    if old_left == 0 || new_left == 0 {
                        return Err(bad());
                    }
                    hunk.lines
                        .push(HunkLine::Context(line.get(1..).unwrap_or("").to_string()));
                    old_left -= 1;
                    new_left -= 1;
                }
                Some(b'-') => {
                    if old_left == 0 {
                        return Err(bad());
                    }
                    hunk.lines.push(HunkLine::Removed(line[1..].to_string()));
                    old_left -= 1;
                }
                Some(b'+') => {
                    if new_left == 0 {
                        return Err(bad());
                    }
                    hunk.lines.push(HunkLine::Added(line[1..].to_string()));
                    new_left -= 1;
                }
                Some(b'\\') => self.no_newline_marker(&mut hunk),
                _ => return Err(bad()),
            }
            self.pos += 1;
        }
        if self
            .lines
            .get(self.pos)
            .is_some_and(|l| l.starts_with('\\'))
        {
            self.no_newline_marker(&mut hunk);
            self.pos += 1;
        }
        Ok(hunk)
    }

    fn no_newline_marker(&self, hunk: &mut Hunk) {
        match hunk.lines.last() {
            Some(HunkLine::Context(_)) => {
                hunk.old_missing_newline = true;
                hunk.new_missing_newline = true;
            }
            Some(HunkLine::Removed(_)) => hunk.old_missing_newline = true,
            Some(HunkLine::Added(_)) => hunk.new_missing_newline = true,
            None => {}
        }
    }
}

fn split_git_paths(rest: &str) -> (&str, &str) {
    // `a/<path> b/<path>`; paths with spaces are split at the ` b/` separator.
    if let Some(idx) = rest.find(" b/") {
        (&rest[..idx], &rest[idx + 1..])
    } else {
        rest.split_once(' ').unwrap_or((rest, rest))
    }
}

fn header_path(raw: &str, line: usize) -> Result<Option<String>, ParseError> {
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return Ok(None);
    }
    clean_path(raw, line).map(Some)
}

fn clean_path(raw: &str, line: usize) -> Result<String, ParseError> {
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    let safe = !stripped.is_empty()
        && Path::new(stripped)
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !safe {
        return Err(ParseError::UnsafePath {
            line,
            path: raw.to_string(),
        });
    }
    Ok(stripped.to_string())
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let body = line.strip_prefix("@@ ")?;
    let end = body.find(" @@")?;
    let mut parts = body[..end].split(' ');
    let old = parts.next()?.strip_prefix('-')?;
    let new = parts.next()?.strip_prefix('+')?;
    if parts.next().is_some() {
        return None;
    }
    let range = |s: &str| -> Option<(usize, usize)> {
        match s.split_once(',') {
            Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
            None => Some((s.parse().ok()?, 1)),
        }
    };
    let (os, ol) = range(old)?;
    let (ns, nl) = range(new)?;
    Some((os, ol, ns, nl))
}

/// Text split into lines, remembering whether the final line was terminated.
struct Lines<'a> {
    lines: Vec<&'a str>,
    trailing_newline: bool,
}

impl<'a> Lines<'a> {
    fn of(text: &'a str) -> Self {
        if text.is_empty() {
            return Self {
                lines: Vec::new(),
                trailing_newline: true,
            };
        }
        let trailing_newline = text.ends_with('\n');
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self {
            lines: body.split('\n').collect(),
            trailing_newline,
        }
    }
}

fn join_lines(lines: &[&str], trailing_newline: bool) -> String {
    let mut out = lines.join("\n");
    if trailing_newline && !lines.is_empty() {
        out.push('\n');
    }
    out
}

/// Applies one file section to `original` (None when absent). Returns the new
/// content, or None when the file is deleted. `fuzz` is the number of outer
/// context lines that may be ignored when an exact match fails.
pub fn apply_file(
    original: Option<&str>,
    fp: &FilePatch,
    fuzz: usize,
) -> Result<Option<String>, ApplyError> {
    let path = fp.path().to_string();
    if fp.binary {
        return Err(ApplyError::Binary { path });
    }
    if fp.is_creation() {
        if original.is_some() {
            return Err(ApplyError::AlreadyExists { path });
        }
        let mut lines = Vec::new();
        let mut trailing = true;
        for (i, h) in fp.hunks.iter().enumerate() {
            if !h.old_lines().is_empty() {
                return Err(ApplyError::HunkMismatch { path, hunk: i + 1 });
            }
            lines.extend(h.new_lines());
            trailing = !h.new_missing_newline;
        }
        return Ok(Some(join_lines(&lines, trailing)));
    }
    let Some(original) = original else {
        return Err(ApplyError::MissingFile { path });
    };
    let src = Lines::of(original);
    let mut out: Vec<&str> = Vec::with_capacity(src.lines.len());
    let mut cursor = 0usize;
    let mut trailing = src.trailing_newline;
    for (i, hunk) in fp.hunks.iter().enumerate() {
        let mismatch = || ApplyError::HunkMismatch {
            path: path.clone(),
            hunk: i + 1,
        };
        let old = hunk.old_lines();
        let new = hunk.new_lines();
        let expected = if hunk.old_len == 0 {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        let max_fuzz = fuzz
            .min(hunk.leading_context())
            .min(hunk.trailing_context());
        let mut found = None;
        for f in 0..=max_fuzz {
            let lead = f.min(hunk.leading_context());
            let tail = f.min(hunk.trailing_context());
            let block = &old[lead..old.len() - tail];
            let must_end_at_eof = hunk.old_missing_newline && tail == 0;
            if let Some(at) = locate(&src.lines, block, expected + lead, cursor, must_end_at_eof) {
                found = Some((at, lead, tail));
                break;
            }
        }
        let (at, lead, tail) = found.ok_or_else(mismatch)?;
        let block_len = old.len() - lead - tail;
        let reaches_eof = at + block_len == src.lines.len() && block_len > 0;
        if reaches_eof && tail == 0 && !hunk.old_missing_newline && !src.trailing_newline {
            return Err(mismatch());
        }
        out.extend_from_slice(&src.lines[cursor..at]);
        out.extend_from_slice(&new[lead..new.len() - tail]);
        cursor = at + block_len;
        if cursor == src.lines.len() && tail == 0 {
            trailing = !hunk.new_missing_newline;
        }
    }
    out.extend_from_slice(&src.lines[cursor..]);
    if fp.is_deletion() {
        if !out.is_empty() {
            return Err(ApplyError::HunkMismatch {
                path,
                hunk: fp.hunks.len(),
            });
        }
        return Ok(None);
    }
    Ok(Some(join_lines(&out, trailing)))
}

/// Finds `block` in `lines` at or after `min`, nearest to `expected`.
fn locate(
    lines: &[&str],
    block: &[&str],
    expected: usize,
    min: usize,
    must_end_at_eof: bool,
) -> Option<usize> {
    if block.len() > lines.len() {
        return None;
    }
    let last = lines.len() - block.len();
    let matches = |at: usize| {
        at >= min
            && at <= last
            && lines[at..at + block.len()] == *block
            && (!must_end_at_eof || at + block.len() == lines.len())
    };
    let expected = expected.min(last);
    for delta in 0..=lines.len() {
        if let Some(at) = expected.checked_add(delta).filter(|&a| matches(a)) {
            return Some(at);
        }
        if let Some(at) = expected.checked_sub(delta).filter(|&a| matches(a)) {
            return Some(at);
        }
        if expected + delta > last && expected < delta + min {
            break;
        }
    }
    None
}

/// Applies `patch` to the directory `root`. All files are patched in memory
/// first; nothing is written unless every section applies.
pub fn apply_to_dir(root: &Path, patch: &Patch, fuzz: usize) -> Result<Vec<String>, ApplyError> {
    let mut staged: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut touched = Vec::new();
    for fp in &patch.files {
        let read_path = fp.old_path.as_deref().unwrap_or_else(|| fp.path());
        let current = match staged.get(read_path) {
            Some(c) => c.clone(),
            None => read_text(root, read_path)?,
        };
        let original = if fp.is_creation() {
            match staged.get(fp.path()) {
                Some(c) => c.clone(),
                None => read_text(root, fp.path())?,
            }
        } else {
            current
        };
        let updated = apply_file(original.as_deref(), fp, fuzz)?;
        if let (Some(old), Some(new)) = (&fp.old_path, &fp.new_path) {
            if old != new {
                staged.insert(old.clone(), None);
            }
        }
        staged.insert(fp.path().to_string(), updated);
        if !touched.iter().any(|p: &String| p == fp.path()) {
            touched.push(fp.path().to_string());
        }
    }
    for (rel, content) in &staged {
        let full = root.join(rel);
        let io = |e: std::io::Error| ApplyError::Io {
            path: rel.clone(),
            message: e.to_string(),
        };
        match content {
            Some(text) => {
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(io)?;
                }
                fs::write(&full, text).map_err(io)?;
            }
            None => {
                if full.exists() {
                    fs::remove_file(&full).map_err(io)?;
                }
            }
        }
    }
    Ok(touched)
}

fn read_text(root: &Path, rel: &str) -> Result<Option<String>, ApplyError> {
    let full = root.join(rel);
    if !full.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(&full).map_err(|e| ApplyError::Io {
        path: rel.to_string(),
        message: e.to_string(),
    })?;
    String::from_utf8(bytes)
        .map(Some)
        .map_err(|_| ApplyError::NotText {
            path: rel.to_string(),
        })
}

/// Renders a git-style diff of one file. Returns "" when contents are equal.
pub fn diff_file(path: &str, old: Option<&str>, new: Option<&str>) -> String {
    if old == new {
        return String::new();
    }
    let mut out = String::new();
    let _ = writeln!(out, "diff --git a/{path} b/{path}");
    match (old, new) {
        (None, Some(_)) => out.push_str("new file mode 100644\n"),
        (Some(_), None) => out.push_str("deleted file mode 100644\n"),
        _ => {}
    }
    let old_text = old.unwrap_or("");
    let new_text = new.unwrap_or("");
    if old_text.is_empty() && new_text.is_empty() {
        return out;
    }
    let old_name = old.map_or("/dev/null".to_string(), |_| format!("a/{path}"));
    let new_name = new.map_or("/dev/null".to_string(), |_| format!("b/{path}"));
    let _ = writeln!(out, "--- {old_name}");
    let _ = writeln!(out, "+++ {new_name}");

    let old_lines: Vec<&str> = old_text.split_inclusive('\n').collect();
    let new_lines: Vec<&str> = new_text.split_inclusive('\n').collect();
    let ops = similar::capture_diff_slices(Algorithm::Myers, &old_lines, &new_lines);
    for group in similar::group_diff_ops(ops, CONTEXT_LINES) {
        let (Some(first), Some(last)) = (group.first(), group.last()) else {
            continue;
        };
        let old_range = first.old_range().start..last.old_range().end;
        let new_range = first.new_range().start..last.new_range().end;
        let start = |r: &std::ops::Range<usize>| if r.is_empty() { r.start } else { r.start + 1 };
        let _ = writeln!(
            out,
            "@@ -{},{} +{},{} @@",
            start(&old_range),
            old_range.len(),
            start(&new_range),
            new_range.len()
        );
        for op in &group {
            let (tag, o, n) = op.as_tag_tuple();
            match tag {
                DiffTag::Equal => {
                    for line in &old_lines[o] {
                        emit_line(&mut out, ' ', line);
                    }
                }
                DiffTag::Delete => {
                    for line in &old_lines[o] {
                        emit_line(&mut out, '-', line);
                    }
                }
                DiffTag::Insert => {
                    for line in &new_lines[n] {
                        emit_line(&mut out, '+', line);
                    }
                }
                DiffTag::Replace => {
                    for line in &old_lines[o] {
                        emit_line(&mut out, '-', line);
                    }
                    for line in &new_lines[n] {
                        emit_line(&mut out, '+', line);
                    }
                }
            }
        }
    }
    out
}

fn emit_line(out: &mut String, marker: char, line: &str) {
    out.push(marker);
    match line.strip_suffix('\n') {
        Some(body) => {
            out.push_str(body);
            out.push('\n');
        }
        None => {
            out.push_str(line);
            out.push('\n');
            out.push_str(NO_NEWLINE_MARKER);
            out.push('\n');
        }
    }
}

/// Relative file paths under `root`, sorted, using `/` separators.
pub fn list_files(root: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields children of root");
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        out.push(parts.join("/"));
    }
    out.sort();
    Ok(out)
}

/// Diff of every file that differs between two directory trees.
pub fn diff_trees(base: &Path, work: &Path) -> std::io::Result<String> {
    let mut paths = list_files(base)?;
    paths.extend(list_files(work)?);
    paths.sort();
    paths.dedup();
    let mut out = String::new();
    for rel in paths {
        let old = read_optional(&base.join(&rel))?;
        let new = read_optional(&work.join(&rel))?;
        if old == new {
            continue;
        }
        let as_text = |b: &Option<Vec<u8>>| -> Option<Option<String>> {
            match b {
                None => Some(None),
                Some(bytes) => String::from_utf8(bytes.clone()).ok().map(Some),
            }
        };
        match (as_text(&old), as_text(&new)) {
            (Some(o), Some(n)) => out.push_str(&diff_file(&rel, o.as_deref(), n.as_deref())),
            _ => {
                let _ = writeln!(out, "diff --git a/{rel} b/{rel}");
                let _ = writeln!(out, "Binary files a/{rel} and b/{rel} differ");
            }
        }
    }
    Ok(out)
}

fn read_optional(path: &Path) -> std::io::Result<Option<Vec<u8>>> {
    if path.is_file() {
        fs::read(path).map(Some)
    } else {
        Ok(None)
    }
}
