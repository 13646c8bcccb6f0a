use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let mut buf = Vec::new();
    cbindgen::generate(&crate_dir)
        .expect("header generation failed")
        .write(&mut buf);
    let header = String::from_utf8(buf).expect("header is not utf-8");

    // refresh the committed header only when it actually changed, so
    // rebuilds stay quiet
    let out = crate_dir.join("include").join("taco.h");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    if std::fs::read_to_string(&out).ok().as_deref() != Some(&header) {
        std::fs::write(&out, header).unwrap();
    }
}
