//! Stamps a content fingerprint of the source tree into the binary so run
//! manifests can record exactly which code version produced them.

use std::fs;
use std::path::Path;

fn fnv1a64(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

fn walk(dir: &Path, files: &mut Vec<std::path::PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let p = entry.path();
        if p.is_dir() {
            walk(&p, files);
        } else if p.extension().is_some_and(|e| e == "rs") {
            files.push(p);
        }
    }
}

fn main() {
    let mut files = Vec::new();
    walk(Path::new("src"), &mut files);
    walk(Path::new("../core/src"), &mut files);
    files.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for f in &files {
        fnv1a64(&mut h, f.to_string_lossy().as_bytes());
        if let Ok(bytes) = fs::read(f) {
            fnv1a64(&mut h, &bytes);
        }
        println!("cargo:rerun-if-changed={}", f.display());
    }
    println!("cargo:rerun-if-changed=../core/src");
    println!("cargo:rerun-if-changed=src");
    println!("cargo:rustc-env=CODE_HASH={h:016x}");
}
