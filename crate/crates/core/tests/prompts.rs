//! Rendered prompt templates pinned byte-for-byte against tests/golden.
//! Set `SPACON_BLESS=1` to rewrite the golden files.

use std::path::PathBuf;

use spatial_contrast::dataset_forge::{
    build_caption_negative_prompt, build_qa_negative_prompt, build_scene_caption_prompt, system_prompt,
};

fn check(name: &str, actual: &str) {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("SPACON_BLESS").is_some() {
        std::fs::write(&p, actual).unwrap();
    }
    let want = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    assert_eq!(actual.as_bytes(), want.as_bytes(), "{name} drifted from its golden file");
}

fn objects() -> Vec<String> {
    ["chair", "chair", "table", "trash can"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn qa_negative_prompt_golden() {
    let p = build_qa_negative_prompt("What color is the chair next to the table?", "brown", &objects()).unwrap();
    assert!(p.warnings.is_empty());
    check("qa_negative.txt", &p.text);
}

#[test]
fn qa_negative_prompt_without_objects_golden() {
    let p = build_qa_negative_prompt("Where is the lamp?", "on the desk", &[]).unwrap();
    assert_eq!(p.warnings.len(), 1);
    check("qa_negative_no_objects.txt", &p.text);
}

#[test]
fn caption_negative_prompt_golden() {
    let p = build_caption_negative_prompt("chair", "a brown wooden chair pushed under the table.").unwrap();
    check("caption_negative.txt", &p);
}

#[test]
fn scene_caption_prompt_golden() {
    check("scene_caption.txt", build_scene_caption_prompt());
}

#[test]
fn system_prompt_golden() {
    check("system.txt", system_prompt());
}

#[test]
fn prompt_builders_are_pure() {
    let a = build_qa_negative_prompt("Q?", "A", &objects()).unwrap();
    let b = build_qa_negative_prompt("Q?", "A", &objects()).unwrap();
    assert_eq!(a, b);
}
