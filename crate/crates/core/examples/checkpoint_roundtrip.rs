//! Saves a freshly initialized model, reloads it bit-for-bit, and shows the
//! error for a truncated file.

use advtts::model::{init_model, ModelConfig};
use advtts::trainopt::{load_checkpoint, manifest_text, save_checkpoint};

fn main() -> advtts::Result<()> {
    let cfg = ModelConfig::new(12, 16, 8);
    let params = init_model(&cfg, 1)?;
    let dir = std::env::temp_dir().join(format!("advtts-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");

    save_checkpoint(&params, None, &path)?;
    print!("{}", manifest_text(&params, None));
    let back = load_checkpoint(&path)?;
    assert_eq!(back.params, params);
    println!("{} parameters restored exactly", back.params.len());

    let bytes = std::fs::read(&path)?;
    std::fs::write(&path, &bytes[..bytes.len() - 3])?;
    match load_checkpoint(&path) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => unreachable!("truncated checkpoint loaded"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
