use std::fs;
use std::path::Path;

use chunkd::directive::{scan_document, slice_lines, DirectiveKind, DocumentItem};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    literal: String,
    expected: DirectiveKind,
}

fn load() -> Vec<Case> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus/directives.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_literal_parses_to_expected_kind() {
    let cases = load();
    assert!(cases.len() >= 14);
    for case in cases {
        let items =
            scan_document(&case.literal).unwrap_or_else(|e| panic!("{:?}: {e}", case.literal));
        let directives: Vec<_> = items
            .iter()
            .filter_map(|i| match i {
                DocumentItem::Directive(d) => Some(d),
                DocumentItem::Text(_) => None,
            })
            .collect();
        assert_eq!(directives.len(), 1, "{:?}", case.literal);
        assert_eq!(directives[0].kind, case.expected, "{:?}", case.literal);
        assert_eq!(directives[0].text, case.literal);
    }
}

#[test]
fn literals_inside_verbatim_are_text() {
    for case in load() {
        let doc = format!("\\begin{{verbatim}}\n{}\n\\end{{verbatim}}\n", case.literal);
        let items = scan_document(&doc).unwrap();
        assert!(
            items.iter().all(|i| matches!(i, DocumentItem::Text(_))),
            "{:?}",
            case.literal
        );
    }
}

#[test]
fn line_range_forms_agree() {
    let text: String = (1..=19).map(|i| format!("line {i}\n")).collect();
    let expected = "line 17\nline 18\nline 19\n";
    let forms = [
        "\\showCode{R}{f.R}[17][19]",
        "\\showCode{R}{f.R}[17][]",
        "\\showCode{R}{f.R}[17]",
    ];
    for form in forms {
        let items = scan_document(form).unwrap();
        let DocumentItem::Directive(d) = &items[0] else {
            panic!("{form}")
        };
        let DirectiveKind::ShowCode { first, last, .. } = d.kind else {
            panic!("{form}")
        };
        assert_eq!(slice_lines(&text, first, last).unwrap(), expected, "{form}");
    }
}
