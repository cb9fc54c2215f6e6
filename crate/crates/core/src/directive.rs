//! Directive scanner for `.tex` documents.
//!
//! This is not a TeX parser. It finds the chunk commands (`\runExtCode`,
//! `\showCode`, `\includeOutput`, `\inln`, the per-language shortcuts such as
//! `\runR` and `\inlnJulia`) and `filecontents*` blocks, parses their
//! brace-balanced arguments, and hands everything else back as text.
//!
//! Commands inside `%` comments, `\verb` spans and verbatim-like
//! environments are left alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectiveError {
    #[error("line {line}: unbalanced braces in argument of \\{command}")]
    UnbalancedBraces { line: usize, command: String },
    #[error("line {line}: bad optional argument `[{value}]` for \\{command}")]
    UnknownOptional {
        line: usize,
        command: String,
        value: String,
    },
    #[error("line {line}: \\{command} is missing a mandatory argument")]
    MissingArgument { line: usize, command: String },
    #[error("line {line}: \\begin{{{env}}} is never closed")]
    UnterminatedEnvironment { line: usize, env: String },
    #[error("inline code may not contain a double quote")]
    QuoteNotAllowed,
    #[error("line range {first}..={last} is outside a {lines}-line file")]
    RangeOutOfBounds {
        first: usize,
        last: usize,
        lines: usize,
    },
}

impl DirectiveError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DirectiveError::UnbalancedBraces { line, .. }
            | DirectiveError::UnknownOptional { line, .. }
            | DirectiveError::MissingArgument { line, .. }
            | DirectiveError::UnterminatedEnvironment { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// How a chunk output is embedded in the document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Verbatim inside a framed box.
    #[default]
    Vbox,
    /// Raw LaTeX.
    Tex,
    /// Inside the running text.
    Inline,
}

impl FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vbox" => Ok(OutputMode::Vbox),
            "tex" => Ok(OutputMode::Tex),
            "inline" => Ok(OutputMode::Inline),
            other => Err(format!("unknown output mode `{other}`")),
        }
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::Vbox => "vbox",
            OutputMode::Tex => "tex",
            OutputMode::Inline => "inline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DirectiveKind {
    /// `\runExtCode{program}{source}{output}[run]`
    RunExt {
        program: String,
        source: String,
        output: String,
        run_override: Option<String>,
    },
    /// `\showCode{language}{source}[first][last]`
    ShowCode {
        language: String,
        source: String,
        first: Option<usize>,
        last: Option<usize>,
    },
    /// `\includeOutput{output}[mode]`
    IncludeOutput { output: String, mode: OutputMode },
    /// `\inln{program}{code}[mode]`; mode is `inline` or `vbox`.
    Inline {
        program: String,
        code: String,
        mode: OutputMode,
    },
    /// `\runR[batch]{source}{output}[run]` and friends.
    ShortRun {
        backend: String,
        batch_override: Option<String>,
        source: String,
        output: String,
        run_override: Option<String>,
    },
    /// `\inlnR[batch]{code}[mode]` and friends.
    ShortInline {
        backend: String,
        batch_override: Option<String>,
        code: String,
        mode: OutputMode,
    },
    /// `\begin{filecontents*}[overwrite]{path} ... \end{filecontents*}`
    FileBlock {
        path: String,
        body: String,
        overwrite: bool,
    },
}

impl DirectiveKind {
    /// Whether the directive runs (or reuses) a chunk.
    pub fn is_executable(&self) -> bool {
        matches!(
            self,
            DirectiveKind::RunExt { .. }
                | DirectiveKind::Inline { .. }
                | DirectiveKind::ShortRun { .. }
                | DirectiveKind::ShortInline { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub kind: DirectiveKind,
    /// 1-based line of the backslash.
    pub line: usize,
    /// The exact source text of the directive.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DocumentItem {
    Text(String),
    Directive(Directive),
}

impl DocumentItem {
    pub fn source_text(&self) -> &str {
        match self {
            DocumentItem::Text(t) => t,
            DocumentItem::Directive(d) => &d.text,
        }
    }
}

/// Concatenates the source text of every item.
pub fn reassemble(items: &[DocumentItem]) -> String {
    items.iter().map(DocumentItem::source_text).collect()
}

const VERBATIM_ENVS: &[&str] = &[
    "verbatim",
    "verbatim*",
    "Verbatim",
    "Verbatim*",
    "BVerbatim",
    "LVerbatim",
    "minted",
    "lstlisting",
    "comment",
    "filecontents",
];

enum Shape {
    RunExt,
    ShowCode,
    IncludeOutput,
    Inline,
    ShortRun(&'static str),
    ShortInline(&'static str),
}

fn shape_of(name: &str) -> Option<Shape> {
    Some(match name {
        "runExtCode" => Shape::RunExt,
        "showCode" => Shape::ShowCode,
        "includeOutput" => Shape::IncludeOutput,
        "inln" => Shape::Inline,
        "runR" => Shape::ShortRun("R"),
        "runJulia" => Shape::ShortRun("julia"),
        "runMatLab" | "runMatlab" => Shape::ShortRun("matlab"),
        "inlnR" => Shape::ShortInline("R"),
        "inlnJulia" => Shape::ShortInline("julia"),
        "inlnMatLab" | "inlnMatlab" => Shape::ShortInline("matlab"),
        _ => return None,
    })
}

struct Scanner<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    /// Line number at `line_pos`.
    line: usize,
    line_pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Self {
        Scanner {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            line: 1,
            line_pos: 0,
        }
    }

    fn line_at(&mut self, pos: usize) -> usize {
        if pos < self.line_pos {
            self.line = 1;
            self.line_pos = 0;
        }
        self.line += self.bytes[self.line_pos..pos]
            .iter()
            .filter(|&&b| b == b'\n')
            .count();
        self.line_pos = pos;
        self.line
    }

    fn peek(&self, at: usize) -> Option<u8> {
        self.bytes.get(at).copied()
    }

    fn skip_blanks(&self, mut at: usize) -> usize {
        while matches!(self.peek(at), Some(b' ' | b'\t')) {
            at += 1;
        }
        at
    }

    fn letters_end(&self, mut at: usize) -> usize {
        while self.peek(at).is_some_and(|b| b.is_ascii_alphabetic()) {
            at += 1;
        }
        at
    }

    /// Parses `{...}` starting at `at`; returns the inner text and the
    /// position after the closing brace. `None` if there is no `{` at `at`.
    fn group(&self, at: usize) -> Option<Result<(&'a str, usize), ()>> {
        if self.peek(at) != Some(b'{') {
            return None;
        }
        let mut depth = 0usize;
        let mut i = at;
        while i < self.bytes.len() {
            match self.bytes[i] {
                b'\\' => i += 1,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(Ok((&self.src[at + 1..i], i + 1)));
                    }
                }
                _ => {}
            }
            i += 1;
        }
        Some(Err(()))
    }

    /// Parses `[...]` at `at`, hiding brackets inside braces.
    fn optional(&self, at: usize) -> Option<Result<(&'a str, usize), ()>> {
        if self.peek(at) != Some(b'[') {
            return None;
        }
        let mut depth = 0usize;
        let mut i = at + 1;
        while i < self.bytes.len() {
            match self.bytes[i] {
                b'\\' => i += 1,
                b'{' => depth += 1,
                b'}' => depth = depth.saturating_sub(1),
                b']' if depth == 0 => return Some(Ok((&self.src[at + 1..i], i + 1))),
                b'\n' if self.bytes.get(i + 1) == Some(&b'\n') => break,
                _ => {}
            }
            i += 1;
        }
        Some(Err(()))
    }

    fn find_from(&self, at: usize, needle: &str) -> Option<usize> {
        self.src[at..].find(needle).map(|i| at + i)
    }

    fn line_end(&self, at: usize) -> usize {
        self.src[at..]
            .find('\n')
            .map_or(self.bytes.len(), |i| at + i + 1)
    }
}

struct Args<'s, 'a> {
    sc: &'s Scanner<'a>,
    pos: usize,
    line: usize,
    command: &'a str,
}

impl<'s, 'a> Args<'s, 'a> {
    fn mandatory(&mut self) -> Result<&'a str, DirectiveError> {
        let at = self.sc.skip_blanks(self.pos);
        match self.sc.group(at) {
            None => Err(DirectiveError::MissingArgument {
                line: self.line,
                command: self.command.to_string(),
            }),
            Some(Err(())) => Err(DirectiveError::UnbalancedBraces {
                line: self.line,
                command: self.command.to_string(),
            }),
            Some(Ok((text, end))) => {
                self.pos = end;
                Ok(text)
            }
        }
    }

    /// Optional argument; `leading` ones may follow blanks, trailing ones
    /// must be adjacent to the previous argument.
    fn optional(&mut self, leading: bool) -> Result<Option<&'a str>, DirectiveError> {
        let at = if leading {
            self.sc.skip_blanks(self.pos)
        } else {
            self.pos
        };
        match self.sc.optional(at) {
            None => Ok(None),
            Some(Err(())) => Err(DirectiveError::UnknownOptional {
                line: self.line,
                command: self.command.to_string(),
                value: self.sc.src[at + 1..self.sc.line_end(at)]
                    .trim_end()
                    .to_string(),
            }),
            Some(Ok((text, end))) => {
                self.pos = end;
                Ok(Some(text))
            }
        }
    }

    fn bad_optional(&self, value: &str) -> DirectiveError {
        DirectiveError::UnknownOptional {
            line: self.line,
            command: self.command.to_string(),
            value: value.to_string(),
        }
    }

    fn line_number(&mut self, value: Option<&str>) -> Result<Option<usize>, DirectiveError> {
        match value.map(str::trim) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .map(Some)
                .ok_or_else(|| self.bad_optional(v)),
        }
    }

    fn output_mode(
        &self,
        value: Option<&str>,
        default: OutputMode,
        allowed: &[OutputMode],
    ) -> Result<OutputMode, DirectiveError> {
        match value.map(str::trim) {
            None | Some("") => Ok(default),
            Some(v) => v
                .parse::<OutputMode>()
                .ok()
                .filter(|m| allowed.contains(m))
                .ok_or_else(|| self.bad_optional(v)),
        }
    }
}

fn non_empty(s: Option<&str>) -> Option<String> {
    s.map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn parse_command(
    sc: &Scanner<'_>,
    shape: Shape,
    name: &str,
    after_name: usize,
    line: usize,
) -> Result<(DirectiveKind, usize), DirectiveError> {
    let mut a = Args {
        sc,
        pos: after_name,
        line,
        command: &sc.src[after_name - name.len()..after_name],
    };
    let kind = match shape {
        Shape::RunExt => {
            let program = a.mandatory()?.to_string();
            let source = a.mandatory()?.to_string();
            let output = a.mandatory()?.trim().to_string();
            let run_override = a.optional(false)?.map(|s| s.trim().to_string());
            DirectiveKind::RunExt {
                program,
                source,
                output,
                run_override,
            }
        }
        Shape::ShowCode => {
            let language = a.mandatory()?.to_string();
            let source = a.mandatory()?.to_string();
            let first_arg = a.optional(false)?;
            let first = a.line_number(first_arg)?;
            let last = match first_arg {
                Some(_) => {
                    let last = a.optional(false)?;
                    a.line_number(last)?
                }
                None => None,
            };
            DirectiveKind::ShowCode {
                language,
                source,
                first,
                last,
            }
        }
        Shape::IncludeOutput => {
            let output = a.mandatory()?.trim().to_string();
            let mode = a.optional(false)?;
            let mode = a.output_mode(
                mode,
                OutputMode::Vbox,
                &[OutputMode::Vbox, OutputMode::Tex, OutputMode::Inline],
            )?;
            DirectiveKind::IncludeOutput { output, mode }
        }
        Shape::Inline => {
            let program = a.mandatory()?.to_string();
            let code = a.mandatory()?.to_string();
            let mode = a.optional(false)?;
            let mode = a.output_mode(
                mode,
                OutputMode::Inline,
                &[OutputMode::Inline, OutputMode::Vbox],
            )?;
            DirectiveKind::Inline {
                program,
                code,
                mode,
            }
        }
        Shape::ShortRun(backend) => {
            let batch_override = non_empty(a.optional(true)?);
            let source = a.mandatory()?.to_string();
            let output = a.mandatory()?.trim().to_string();
            let run_override = a.optional(false)?.map(|s| s.trim().to_string());
            DirectiveKind::ShortRun {
                backend: backend.to_string(),
                batch_override,
                source,
                output,
                run_override,
            }
        }
        Shape::ShortInline(backend) => {
            let batch_override = non_empty(a.optional(true)?);
            let code = a.mandatory()?.to_string();
            let mode = a.optional(false)?;
            let mode = a.output_mode(
                mode,
                OutputMode::Inline,
                &[OutputMode::Inline, OutputMode::Vbox],
            )?;
            DirectiveKind::ShortInline {
                backend: backend.to_string(),
                batch_override,
                code,
                mode,
            }
        }
    };
    Ok((kind, a.pos))
}

/// Splits a document into passthrough text and directives, in order.
///
/// Concatenating the source text of the returned items reproduces `src`.
pub fn scan_document(src: &str) -> Result<Vec<DocumentItem>, DirectiveError> {
    let mut sc = Scanner::new(src);
    let mut items = Vec::new();
    let mut text_start = 0;
    let len = src.len();

    let push_text = |items: &mut Vec<DocumentItem>, from: usize, to: usize| {
        if to > from {
            if let Some(DocumentItem::Text(prev)) = items.last_mut() {
                prev.push_str(&src[from..to]);
            } else {
                items.push(DocumentItem::Text(src[from..to].to_string()));
            }
        }
    };

    while sc.pos < len {
        let b = sc.bytes[sc.pos];
        if b == b'%' {
            sc.pos = sc.line_end(sc.pos);
            continue;
        }
        if b != b'\\' {
            sc.pos += 1;
            continue;
        }
        let start = sc.pos;
        let name_end = sc.letters_end(start + 1);
        if name_end == start + 1 {
            // Control symbol such as `\%` or `\\`.
            sc.pos = (start + 2).min(len);
            continue;
        }
        let name = &src[start + 1..name_end];

        match name {
            "verb" => {
                let mut at = name_end;
                if sc.peek(at) == Some(b'*') {
                    at += 1;
                }
                sc.pos = match src[at..].chars().next() {
                    Some(delim) if !delim.is_alphabetic() && delim != '\n' && delim != ' ' => {
                        let body = at + delim.len_utf8();
                        let stop = sc.line_end(body);
                        src[body..stop]
                            .find(delim)
                            .map_or(stop, |i| body + i + delim.len_utf8())
                    }
                    _ => at,
                };
                continue;
            }
            "begin" => {
                let Some(Ok((env, after_env))) = sc.group(name_end) else {
                    sc.pos = name_end;
                    continue;
                };
                let end_marker = format!("\\end{{{env}}}");
                if env == "filecontents*" {
                    let line = sc.line_at(start);
                    let (kind, end) = parse_file_block(&sc, after_env, &end_marker, line)?;
                    push_text(&mut items, text_start, start);
                    items.push(DocumentItem::Directive(Directive {
                        kind,
                        line,
                        text: src[start..end].to_string(),
                    }));
                    sc.pos = end;
                    text_start = end;
                } else if VERBATIM_ENVS.contains(&env) {
                    let line = sc.line_at(start);
                    let close = sc.find_from(after_env, &end_marker).ok_or_else(|| {
                        DirectiveError::UnterminatedEnvironment {
                            line,
                            env: env.to_string(),
                        }
                    })?;
                    sc.pos = close + end_marker.len();
                } else {
                    sc.pos = after_env;
                }
                continue;
            }
            _ => {}
        }

        let Some(shape) = shape_of(name) else {
            sc.pos = name_end;
            continue;
        };
        let line = sc.line_at(start);
        let (kind, end) = parse_command(&sc, shape, name, name_end, line)?;
        push_text(&mut items, text_start, start);
        items.push(DocumentItem::Directive(Directive {
            kind,
            line,
            text: src[start..end].to_string(),
        }));
        sc.pos = end;
        text_start = end;
    }
    push_text(&mut items, text_start, len);
    Ok(items)
}

fn parse_file_block(
    sc: &Scanner<'_>,
    after_env: usize,
    end_marker: &str,
    line: usize,
) -> Result<(DirectiveKind, usize), DirectiveError> {
    let command = "begin{filecontents*}";
    let mut a = Args {
        sc,
        pos: after_env,
        line,
        command,
    };
    let options = a.optional(true)?;
    let overwrite = options.is_some_and(|o| {
        o.split(',')
            .map(str::trim)
            .any(|opt| opt == "overwrite" || opt == "force")
    });
    let path = a.mandatory()?.trim().to_string();
    // The body starts on the line after `{path}`.
    let body_start = sc.line_end(a.pos);
    let close =
        sc.find_from(a.pos, end_marker)
            .ok_or_else(|| DirectiveError::UnterminatedEnvironment {
                line,
                env: "filecontents*".to_string(),
            })?;
    let body_end = sc.src[..close].rfind('\n').map_or(close, |i| i + 1);
    let body = if body_end > body_start {
        sc.src[body_start..body_end].to_string()
    } else {
        String::new()
    };
    Ok((
        DirectiveKind::FileBlock {
            path,
            body,
            overwrite,
        },
        close + end_marker.len(),
    ))
}

/// Inline chunk code after fence handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InlineCode {
    /// Code wrapped in triple backticks; sent to the engine as is.
    Direct(String),
    /// Anything else; written to a file which the engine then runs.
    ViaTempFile(String),
}

impl InlineCode {
    pub fn code(&self) -> &str {
        match self {
            InlineCode::Direct(c) | InlineCode::ViaTempFile(c) => c,
        }
    }
}

pub fn extract_inline_code(code_arg: &str) -> Result<InlineCode, DirectiveError> {
    if code_arg.contains('"') {
        return Err(DirectiveError::QuoteNotAllowed);
    }
    let trimmed = code_arg.trim();
    const FENCE: &str = "```";
    if trimmed.len() >= 2 * FENCE.len() && trimmed.starts_with(FENCE) && trimmed.ends_with(FENCE) {
        let inner = &trimmed[FENCE.len()..trimmed.len() - FENCE.len()];
        return Ok(InlineCode::Direct(inner.to_string()));
    }
    Ok(InlineCode::ViaTempFile(code_arg.to_string()))
}

/// Inclusive 1-based line range; missing bounds mean the start or the end.
pub fn slice_lines(
    text: &str,
    first: Option<usize>,
    last: Option<usize>,
) -> Result<String, DirectiveError> {
    if first.is_none() && last.is_none() {
        return Ok(text.to_string());
    }
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let first_n = first.unwrap_or(1);
    let last_n = last.unwrap_or(lines.len());
    if lines.is_empty() && first_n == 1 && last_n == 0 {
        return Ok(String::new());
    }
    if first_n == 0 || first_n > last_n || last_n > lines.len() {
        return Err(DirectiveError::RangeOutOfBounds {
            first: first_n,
            last: last_n,
            lines: lines.len(),
        });
    }
    Ok(lines[first_n - 1..last_n].concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn only_directive(src: &str) -> DirectiveKind {
        let items = scan_document(src).unwrap();
        let dirs: Vec<_> = items
            .iter()
            .filter_map(|i| match i {
                DocumentItem::Directive(d) => Some(d.kind.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(dirs.len(), 1, "{src:?} -> {items:?}");
        dirs.into_iter().next().unwrap()
    }

    #[test]
    fn short_run() {
        assert_eq!(
            only_directive(r"\runR{Code/JiJin2016.R}{initprog}"),
            DirectiveKind::ShortRun {
                backend: "R".into(),
                batch_override: None,
                source: "Code/JiJin2016.R".into(),
                output: "initprog".into(),
                run_override: None,
            }
        );
    }

    #[test]
    fn include_tex() {
        assert_eq!(
            only_directive(r"\includeOutput{table2}[tex]"),
            DirectiveKind::IncludeOutput {
                output: "table2".into(),
                mode: OutputMode::Tex
            }
        );
    }

    #[test]
    fn plain_prose() {
        let src = "Just some prose.\nWith two lines and 100% fun.";
        assert_eq!(
            scan_document(src).unwrap(),
            [DocumentItem::Text(src.into())]
        );
        assert_eq!(scan_document("").unwrap(), []);
    }

    #[test]
    fn nested_braces() {
        assert_eq!(
            only_directive(r"\inln{sh}{echo {a{b}}}[vbox]"),
            DirectiveKind::Inline {
                program: "sh".into(),
                code: "echo {a{b}}".into(),
                mode: OutputMode::Vbox,
            }
        );
    }

    #[test]
    fn escaped_braces_do_not_count() {
        assert_eq!(
            only_directive(r"\inlnR{```x\}```}"),
            DirectiveKind::ShortInline {
                backend: "R".into(),
                batch_override: None,
                code: r"```x\}```".into(),
                mode: OutputMode::Inline,
            }
        );
    }

    #[test]
    fn unbalanced() {
        let err = scan_document("line one\n\\runR{a.R}{out").unwrap_err();
        assert!(
            matches!(err, DirectiveError::UnbalancedBraces { line: 2, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn missing_argument() {
        let err = scan_document("\\showCode{R} and text").unwrap_err();
        assert!(matches!(
            err,
            DirectiveError::MissingArgument { line: 1, .. }
        ));
    }

    #[test]
    fn unknown_optional() {
        for src in [
            r"\includeOutput{a}[pdf]",
            r"\inln{sh}{x}[tex]",
            r"\showCode{R}{a.R}[x][2]",
            r"\showCode{R}{a.R}[0]",
            "\\runR{a}{b}[run",
        ] {
            let err = scan_document(src).unwrap_err();
            assert!(
                matches!(err, DirectiveError::UnknownOptional { line: 1, .. }),
                "{src}: {err:?}"
            );
        }
    }

    #[test]
    fn comments_hide_directives() {
        let items = scan_document("% \\runR{a}{b}\n\\% \\runR{c}{d}\n").unwrap();
        assert_eq!(items.len(), 3);
        let DocumentItem::Directive(d) = &items[1] else {
            panic!()
        };
        assert_eq!(d.line, 2);
        assert!(matches!(&d.kind, DirectiveKind::ShortRun { source, .. } if source == "c"));
    }

    #[test]
    fn verbatim_regions_are_text() {
        let src = "\\begin{verbatim}\n\\runR{a}{b}\n\\end{verbatim}\n\\verb|\\runR{x}{y}| \\verb+\\inln{a}{b}+";
        assert_eq!(
            scan_document(src).unwrap(),
            [DocumentItem::Text(src.into())]
        );
    }

    #[test]
    fn unterminated_verbatim() {
        assert!(matches!(
            scan_document("x\n\\begin{verbatim}\n\\runR{a}{b}"),
            Err(DirectiveError::UnterminatedEnvironment { line: 2, .. })
        ));
    }

    #[test]
    fn file_block() {
        let src = "\\begin{filecontents*}[overwrite]{tmp/temp00.R}\nprint(table(paperYear))\n\\end{filecontents*}\n\\runR{tmp/temp00.R}{paperYear}\n";
        let items = scan_document(src).unwrap();
        let DocumentItem::Directive(d) = &items[0] else {
            panic!("{items:?}")
        };
        assert_eq!(
            d.kind,
            DirectiveKind::FileBlock {
                path: "tmp/temp00.R".into(),
                body: "print(table(paperYear))\n".into(),
                overwrite: true,
            }
        );
        assert_eq!(reassemble(&items), src);
    }

    #[test]
    fn file_block_body_is_not_scanned() {
        let src =
            "\\begin{filecontents*}{a.tex}\n\\runR{x}{y}\n% not a comment\n\\end{filecontents*}";
        let items = scan_document(src).unwrap();
        assert_eq!(items.len(), 1);
        assert!(matches!(
            &items[0],
            DocumentItem::Directive(Directive { kind: DirectiveKind::FileBlock { body, overwrite: false, .. }, .. })
                if body == "\\runR{x}{y}\n% not a comment\n"
        ));
    }

    #[test]
    fn trailing_optional_must_be_adjacent() {
        let items = scan_document(r"\includeOutput{a} [tex]").unwrap();
        let DocumentItem::Directive(d) = &items[0] else {
            panic!()
        };
        assert_eq!(d.text, r"\includeOutput{a}");
        assert!(matches!(
            d.kind,
            DirectiveKind::IncludeOutput {
                mode: OutputMode::Vbox,
                ..
            }
        ));
    }

    #[test]
    fn similar_names_are_not_directives() {
        let src = r"\runRx{a}{b} \inlnRR{c} \showCodes{x}";
        assert_eq!(
            scan_document(src).unwrap(),
            [DocumentItem::Text(src.into())]
        );
    }

    #[test]
    fn line_numbers() {
        let src = "a\n\nb \\includeOutput{x}\n\\includeOutput{y}";
        let lines: Vec<_> = scan_document(src)
            .unwrap()
            .into_iter()
            .filter_map(|i| match i {
                DocumentItem::Directive(d) => Some(d.line),
                _ => None,
            })
            .collect();
        assert_eq!(lines, [3, 4]);
    }

    #[test]
    fn inline_code_forms() {
        assert_eq!(
            extract_inline_code("```table(paperYear)```").unwrap(),
            InlineCode::Direct("table(paperYear)".into())
        );
        assert_eq!(
            extract_inline_code("summary(x)").unwrap(),
            InlineCode::ViaTempFile("summary(x)".into())
        );
        assert_eq!(
            extract_inline_code("```print(\"hi\")```"),
            Err(DirectiveError::QuoteNotAllowed)
        );
        assert_eq!(
            extract_inline_code("``````").unwrap(),
            InlineCode::Direct(String::new())
        );
        assert_eq!(
            extract_inline_code("````").unwrap(),
            InlineCode::ViaTempFile("````".into())
        );
    }

    #[test]
    fn slices() {
        let text: String = (1..=19).map(|i| format!("line {i}\n")).collect();
        let tail = "line 17\nline 18\nline 19\n";
        assert_eq!(slice_lines(&text, Some(17), Some(19)).unwrap(), tail);
        assert_eq!(slice_lines(&text, Some(17), None).unwrap(), tail);
        assert_eq!(slice_lines(&text, None, None).unwrap(), text);
        assert_eq!(slice_lines(&text, None, Some(1)).unwrap(), "line 1\n");
        assert!(matches!(
            slice_lines(&text, Some(18), Some(20)),
            Err(DirectiveError::RangeOutOfBounds { lines: 19, .. })
        ));
        assert!(slice_lines(&text, Some(5), Some(4)).is_err());
        assert_eq!(slice_lines("a\nb", Some(2), None).unwrap(), "b");
    }

    fn fragment() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-zA-Z0-9 .,;:()\\[\\]\n]{0,20}",
            Just("%".to_string()),
            Just("\\\\".to_string()),
            Just("\\%".to_string()),
            Just("\\runR{a.R}{out}".to_string()),
            Just("\\runR[Rscript --save]{a.R}{}[run]".to_string()),
            Just("\\includeOutput{out}[inline]".to_string()),
            Just("\\inlnJulia{```1+1```}".to_string()),
            Just("\\showCode{R}{a.R}[2][3]".to_string()),
            Just("\\runExtCode{sh}{s.sh}{o}".to_string()),
            Just("\\verb|\\runR{x}{y}|".to_string()),
            Just("\\begin{verbatim}\n\\runR{x}{y}\n\\end{verbatim}".to_string()),
            Just("\\begin{filecontents*}{f.R}\nx <- 1\n\\end{filecontents*}".to_string()),
            Just("\\section{Title}".to_string()),
            Just("ünïcödé ✓".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn lossless(parts in proptest::collection::vec(fragment(), 0..30)) {
            let doc: String = parts.concat();
            if let Ok(items) = scan_document(&doc) {
                prop_assert_eq!(reassemble(&items), doc);
                for pair in items.windows(2) {
                    let both_text = matches!(pair, [DocumentItem::Text(_), DocumentItem::Text(_)]);
                    prop_assert!(!both_text);
                }
            }
        }

        #[test]
        fn full_range_is_identity(lines in proptest::collection::vec("[^\n]{0,10}", 1..20), trailing in any::<bool>()) {
            let mut text = lines.join("\n");
            if trailing {
                text.push('\n');
            }
            let n = text.split_inclusive('\n').count();
            prop_assert_eq!(slice_lines(&text, Some(1), Some(n)).unwrap(), text);
        }
    }
}
