//! The FEA1 container: named f32 matrices in one little-endian file.

use libra_mil::data::{decode_container, encode_container, Entry};
use libra_mil::numkernel::Matrix;

fn main() -> libra_mil::Result<()> {
    let entries = vec![
        Entry::new(
            "bag_0000",
            Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])?,
        ),
        Entry::new("instance_priors", Matrix::identity(3)),
    ];
    let bytes = encode_container(&entries)?;
    println!("{} bytes, header {:?}", bytes.len(), &bytes[..4]);
    for e in decode_container(&bytes)? {
        println!(
            "{:<16} {:?} first row {:?}",
            e.name,
            e.matrix.shape(),
            e.matrix.row(0)
        );
    }
    match decode_container(&bytes[..bytes.len() - 3]) {
        Err(e) => println!("truncated: {e}"),
        Ok(_) => unreachable!("a truncated container never decodes"),
    }
    Ok(())
}
