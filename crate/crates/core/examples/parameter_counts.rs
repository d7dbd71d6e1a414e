// Parameter breakdown of the production-size variants (d = 128, L = 3).

use guim::model::{count_parameters, Component, ModelConfig, VariantKind};

pub fn run() -> guim::Result<()> {
    let variants = [
        (VariantKind::Guim, 1),
        (VariantKind::Guim, 4),
        (VariantKind::GuiEdi, 4),
        (VariantKind::GuimMh, 4),
    ];
    print!("{:<34}", "component");
    for (v, c) in variants {
        print!("{:>14}", format!("{v} C={c}"));
    }
    println!();
    let counts: Vec<_> = variants
        .iter()
        .map(|&(v, c)| count_parameters(&ModelConfig::production(v, c)))
        .collect();
    for comp in Component::HEADLINE {
        print!("{:<34}", comp.label());
        for p in &counts {
            print!("{:>14}", p.get(comp));
        }
        println!();
    }
    print!("{:<34}", "Total");
    for p in &counts {
        print!("{:>14}", p.headline_total());
    }
    println!();
    print!("{:<34}", "Lookup tables");
    for p in &counts {
        print!("{:>14}", p.lookup_tables_total());
    }
    println!();
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
