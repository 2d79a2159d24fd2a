//! Generate a planted-prototype dataset, write it as a manifest plus FEA1
//! containers, and read it back.

use libra_mil::data::{read_dataset, synth_generate_with_truth, write_dataset, SynthSpec};

fn main() -> libra_mil::Result<()> {
    let spec = SynthSpec {
        bags_per_class: 10,
        ..SynthSpec::default()
    };
    let (ds, truth) = synth_generate_with_truth(&spec, 42)?;
    let dir = std::env::temp_dir().join("libra-mil-synth-example");
    let manifest = write_dataset(&ds, &dir)?;
    let back = read_dataset(&manifest, None)?;

    println!("wrote {}", manifest.display());
    println!(
        "{} bags, {} classes, width {}, {} instance priors, {} bag priors",
        back.bags.len(),
        back.num_classes(),
        back.dim,
        back.instance_priors.rows(),
        back.bag_priors.rows()
    );
    let sizes: Vec<usize> = back.bags.iter().map(|b| b.len()).collect();
    println!(
        "instances per bag: min {} max {}",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );
    println!("planted prototypes: {:?}", truth.prototypes.shape());
    Ok(())
}
