// The `guim` subcommands driven from a config string, end to end in a
// scratch directory: synth, gradcheck, params, pretrain, eval, export.

use guim::cli::{cmd_eval, cmd_export, cmd_gradcheck, cmd_params, cmd_pretrain, cmd_synth};
use guim::config::{parse_pairs, RunConfig};

const CONFIG: &str = "
seed = 3
synth.preset = tiny
model.variant = guim
model.c = 2
train.epochs = 5
eval.candidate_pool = 60
";

pub fn run() -> guim::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply(&parse_pairs(CONFIG)?)?;
    let out = std::env::temp_dir().join(format!("guim-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&out)?;
    let mut log = std::io::stdout();
    cmd_synth(&cfg, &out, &mut log)?;
    cmd_gradcheck(&cfg, &out, &mut log)?;
    cmd_params(&cfg, &out, &mut log)?;
    cmd_pretrain(&cfg, &out, &mut log)?;
    cmd_eval(&cfg, "all", &out, &mut log)?;
    cmd_export(&cfg, &out, &mut log)?;
    print!("{}", std::fs::read_to_string(out.join("results.tsv"))?);
    std::fs::remove_dir_all(&out)?;
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
