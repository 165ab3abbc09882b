//! `fairflow init-fixture`: a small synthetic corpus with a ready-to-run config.

use std::io::Write;
use std::path::Path;

use fairflow::checkpoint::write_atomic;
use fairflow::corpus::CorpusRecord;
use fairflow::embedding::write_planted;
use fairflow::fixtures;

use crate::error::Result;

pub const DEFAULT_TRAIN_SIZE: usize = 800;
pub const DEFAULT_EVAL_SIZE: usize = 100;

pub const CONFIG: &str = r#"# Synthetic fixture: run the stages in order with --config config.toml.
seed = 0
artifacts = "artifacts"

[corpus]
train = "corpus.jsonl"
eval = "eval.jsonl"
format = "jsonl"

[prompt]
word_a = "she"
word_b = "he"

[backend]
kind = "toy"
planted = "planted.tsv"

[discovery]
threshold_phi = 0.9

[flow]
# jitter keeps the flow from collapsing onto the near-degenerate toy manifold
input_noise = 0.1
k_min = 1
k_max = 16

[dictionary]
min_votes = 0.5
names = "names.tsv"

[correction]
threshold_theta = 0.1

[generator]
epochs = 40
# neutral sentences teach the generator to copy
include_no_op = true

[evaluation]
planted = "eval_planted.tsv"
"#;

fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_atomic(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Writes the corpus, planted lists, name list and `config.toml` into `dir`.
pub fn init_fixture(dir: &Path, train: usize, eval: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::CliError::io(format!("cannot create {}", dir.display()), e))?;
    write_records(&dir.join("corpus.jsonl"), &fixtures::corpus_records(train, seed, "train"))?;
    write_records(&dir.join("eval.jsonl"), &fixtures::corpus_records(eval, seed.wrapping_add(1), "eval"))?;
    write_planted(&dir.join("planted.tsv"), &fixtures::planted_words())?;
    write_planted(&dir.join("eval_planted.tsv"), &fixtures::evaluation_planted_words())?;
    fixtures::name_list().save(&dir.join("names.tsv"))?;
    write_atomic(&dir.join("config.toml"), |w| Ok(w.write_all(CONFIG.as_bytes())?))?;
    Ok(())
}
