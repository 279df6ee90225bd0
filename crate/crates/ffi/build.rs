use cbindgen::{Builder, Config, EnumConfig, Language, RenameRule};

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    let config = Config {
        usize_is_size_t: true,
        enumeration: EnumConfig { rename_variants: RenameRule::QualifiedScreamingSnakeCase, ..Default::default() },
        ..Default::default()
    };
    Builder::new()
        .with_config(config)
        .with_crate(&crate_dir)
        .with_language(Language::C)
        .with_include_guard("AGENTVOL_H")
        .with_no_includes()
        .with_sys_include("stddef.h")
        .with_sys_include("stdint.h")
        .with_documentation(true)
        .with_cpp_compat(true)
        .generate()
        .expect("unable to generate bindings")
        .write_to_file(format!("{crate_dir}/include/agentvol.h"));
}
