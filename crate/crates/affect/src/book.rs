//! The guide's chapters, compiled as documentation tests so every code
//! block in the book stays in sync with the library.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub mod $name {}
    };
}

chapter!(introduction, "../../../book/src/introduction.md");
chapter!(autodiff, "../../../book/src/autodiff.md");
chapter!(concordance, "../../../book/src/concordance.md");
chapter!(speech, "../../../book/src/speech.md");
chapter!(visual, "../../../book/src/visual.md");
chapter!(recurrent, "../../../book/src/recurrent.md");
chapter!(training, "../../../book/src/training.md");
chapter!(synthetic_data, "../../../book/src/synthetic-data.md");
chapter!(postprocessing, "../../../book/src/postprocessing.md");
chapter!(analysis, "../../../book/src/analysis.md");
chapter!(cli, "../../../book/src/cli.md");
