//! Every chapter of `book/` is pulled in as a doc comment so that
//! `cargo test` runs its listings against the current library.

#![cfg(doctest)]

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(tensors, "tensors.md");
chapter!(network, "network.md");
chapter!(attribution, "attribution.md");
chapter!(relations, "relations.md");
chapter!(ground_truth, "ground-truth.md");
chapter!(diagnosis, "diagnosis.md");
chapter!(benchmarks, "benchmarks.md");
chapter!(cli, "cli.md");
