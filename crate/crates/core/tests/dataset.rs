use std::fs;
use std::path::Path;

use fdrn_core::eval::ingest_dataset;
use image::{GrayImage, Luma, Rgb, RgbImage};

fn write_gray_image(dir: &Path, id: &str, w: u32, h: u32) {
    GrayImage::from_fn(w, h, |x, y| Luma([((x * 7 + y * 3) % 256) as u8])).save(dir.join("images").join(format!("{id}.png"))).unwrap();
}

fn write_rgb_image(dir: &Path, id: &str, w: u32, h: u32) {
    RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, 40])).save(dir.join("images").join(format!("{id}.png"))).unwrap();
}

fn write_mask(dir: &Path, id: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(dir.join("masks").join(format!("{id}.png"))).unwrap();
}

fn layout() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    dir
}

#[test]
fn instances_skips_and_splits() {
    let dir = layout();
    let p = dir.path();
    write_gray_image(p, "gray", 60, 40);
    write_mask(p, "gray", 60, 40, |x, _| match x {
        0..=9 => 1,
        10..=49 => 0,
        _ => 3,
    });
    write_rgb_image(p, "small", 20, 20);
    write_mask(p, "small", 20, 20, |_, _| 1);
    write_rgb_image(p, "empty", 32, 32);
    write_mask(p, "empty", 32, 32, |_, _| 0);
    write_rgb_image(p, "wrong", 32, 32);
    write_mask(p, "wrong", 33, 32, |_, _| 1);
    write_rgb_image(p, "pair", 32, 32);
    write_mask(p, "pair", 32, 32, |x, y| if x < 4 && y < 4 { 2 } else { 0 });
    fs::write(p.join("manifest.tsv"), "gray\ttrain\nsmall\ttrain\nempty\ttrain\nwrong\tval\npair\tval\nmissing\tval\n").unwrap();

    let ds = ingest_dataset(p).unwrap();
    let mut skipped: Vec<&str> = ds.skipped.iter().map(|(id, _)| id.as_str()).collect();
    skipped.sort();
    assert_eq!(skipped, ["empty", "missing", "small", "wrong"]);

    let train = ds.split("train");
    assert_eq!(train.iter().map(|i| i.instance).collect::<Vec<_>>(), [1, 3]);
    for item in &train {
        assert_eq!(item.image.dims(), (40, 60));
        assert_eq!(item.mask.count(), 400);
        let d = item.image.data();
        assert_eq!(d[[5, 7, 0]], d[[5, 7, 1]]);
        assert_eq!(d[[5, 7, 1]], d[[5, 7, 2]]);
    }
    let val = ds.split("val");
    assert_eq!(val.len(), 1);
    assert_eq!((val[0].id.as_str(), val[0].instance, val[0].mask.count()), ("pair", 2, 16));
}

#[test]
fn missing_manifest_puts_everything_in_one_split() {
    let dir = layout();
    let p = dir.path();
    for id in ["b", "a"] {
        write_rgb_image(p, id, 40, 32);
        write_mask(p, id, 40, 32, |x, y| (x == y) as u8);
    }
    let ds = ingest_dataset(p).unwrap();
    assert!(ds.skipped.is_empty(), "{:?}", ds.skipped);
    assert_eq!(ds.items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(ds.split("all").len(), 2);
}

#[test]
fn malformed_manifest_is_an_error() {
    let dir = layout();
    fs::write(dir.path().join("manifest.tsv"), "only-an-id\n").unwrap();
    assert!(ingest_dataset(dir.path()).is_err());
}

#[test]
fn shipped_configs_match_the_presets() {
    use fdrn_core::FdrnConfig;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(FdrnConfig::load(root.join("smoke.toml")).unwrap(), FdrnConfig::smoke());
    assert_eq!(FdrnConfig::load(root.join("desk.toml")).unwrap(), FdrnConfig::desk());
}
