#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use vrpilot_core::{LanguageHint, LineSpan, RepairTask};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy-overflow")
}

pub fn toy_task() -> RepairTask {
    vrpilot_core::load_manifest(&fixture_dir().join("manifest.json"))
        .unwrap()
        .remove(0)
}

pub fn fixture_file(rel: &str) -> String {
    fs::read_to_string(fixture_dir().join(rel)).unwrap()
}

/// A tiny project whose stages are plain shell commands.
pub fn shell_task(
    root: &Path,
    id: &str,
    build: &str,
    functional: &str,
    security: &str,
) -> RepairTask {
    fs::create_dir_all(root.join("src")).unwrap();
    fs::write(
        root.join("src/f.c"),
        "#include <stdio.h>\nint f(char *p)\n{\n    p[8] = 0;\n    return 0;\n}\nint main(void) { return 0; }\n",
    )
    .unwrap();
    RepairTask {
        id: id.into(),
        project_root: root.to_path_buf(),
        vulnerable_file: "src/f.c".into(),
        function_span: LineSpan::new(2, 6),
        vulnerable_lines: vec![4],
        vulnerability_description: "Out-of-bounds Write".into(),
        cve_id: None,
        language_hint: LanguageHint::C,
        build_command: build.into(),
        functional_test_command: functional.into(),
        security_test_command: security.into(),
        test_failure_pattern: r"FAIL: (\w+)".into(),
        timeout_seconds: 10,
        env: BTreeMap::new(),
    }
}

/// Never plausible: the security stage always reports an ASan error.
pub fn failing_task(root: &Path, id: &str) -> RepairTask {
    shell_task(
        root,
        id,
        "true",
        "true",
        "echo '==1==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x1' >&2; echo '    #0 0x1 in f src/f.c:4' >&2; exit 1",
    )
}

pub fn fenced(code: &str) -> String {
    format!("```c\n{code}\n```")
}
