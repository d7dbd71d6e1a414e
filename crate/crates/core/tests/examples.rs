//! Every example runs to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            #![allow(dead_code)]
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::run().unwrap();
        }
    };
}

example!(synthetic_corpus);
example!(parameter_counts);
example!(gradient_check);
example!(pretrain);
example!(checkpoint_resume);
example!(retrieval_index);
example!(consumer_matching);
example!(consumer_profile);
example!(export_embeddings);
example!(command_pipeline);
example!(compare_variants);

#[test]
fn config_files_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        guim::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
