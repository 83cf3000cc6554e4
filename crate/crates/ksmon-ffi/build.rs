use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = crate_dir.join("include").join("ksmon.h");
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(header);
        }
        // Header generation must not break `cargo build` for downstream
        // consumers of the Rust crate (e.g. while lib.rs is mid-edit);
        // surface the problem as a warning instead.
        Err(error) => println!("cargo:warning=cbindgen failed: {error}"),
    }
}
