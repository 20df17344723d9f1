//! Regenerate `assets/merges.txt` from the bundled class-description catalog.
//!
//! ```text
//! cargo run -p rsmg-core --example train_merges > crates/core/assets/merges.txt
//! ```

use rsmg_core::text::{build_class_texts, merges_to_string, train_merges, TextCatalog, TextMode};

fn main() {
    let texts = build_class_texts(&TextCatalog::default(), TextMode::SharedSpecific);
    let corpus: Vec<&str> = texts.iter().map(|t| t.text.as_str()).collect();
    print!("{}", merges_to_string(&train_merges(&corpus, 2048)));
}
