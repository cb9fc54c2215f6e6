//! Inputs for the criterion benchmarks.

/// A LaTeX document with `chunks` directives of every kind, interleaved with
/// prose, comments and verbatim blocks.
pub fn synthetic_document(chunks: usize) -> String {
    let mut doc = String::from("\\documentclass{article}\n\\begin{document}\n");
    for i in 0..chunks {
        let directive = match i % 6 {
            0 => format!("\\runR{{code/part{i}.R}}{{out{i}}}\n\\includeOutput{{out{i}}}"),
            1 => format!("\\showCode{{R}}{{code/part{i}.R}}[3][9]"),
            2 => "The value is \\inlnR{```cat(mean(x))```} here.".to_string(),
            3 => format!("\\runExtCode{{sh}}{{code/s{i}.sh}}{{}}[cache]\n\\includeOutput{{}}[tex]"),
            4 => format!("\\begin{{filecontents*}}[overwrite]{{tmp/f{i}.R}}\nx <- {i}\nprint(x)\n\\end{{filecontents*}}"),
            _ => "\\begin{verbatim}\n\\runR{not}{parsed}\n\\end{verbatim}".to_string(),
        };
        doc.push_str(&format!(
            "Paragraph {i} with 50\\% of {{braces}} and a \\verb|\\runR{{x}}{{y}}| aside. % comment {{\n{directive}\n\n"
        ));
    }
    doc.push_str("\\end{document}\n");
    doc
}

/// A multi-line payload of roughly `bytes` bytes.
pub fn payload(bytes: usize) -> String {
    let line = "x <- rnorm(100); print(summary(x)) # ünïcödé\n";
    line.repeat(bytes / line.len() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_parses() {
        let items = chunkd::directive::scan_document(&synthetic_document(12)).unwrap();
        let directives = items
            .iter()
            .filter(|i| matches!(i, chunkd::directive::DocumentItem::Directive(_)))
            .count();
        assert_eq!(directives, 14);
    }
}
