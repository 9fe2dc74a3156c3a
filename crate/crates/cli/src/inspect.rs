//! Dump uncertainty maps, scan orders, and branch norms for one image.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use udmamba_core::io::{load_pgm, save_pgm, GrayImage};
use udmamba_core::network::Network;
use udmamba_core::scan_order::{uncertainty_orders, ScanOrderSet};
use udmamba_core::uncertainty::{channel_uncertainty_hwc, UncertaintyMap};
use udmamba_core::Tensor;

use crate::error::CliResult;

fn dump(dir: &Path, tag: &str, u: Option<&UncertaintyMap>, orders: &ScanOrderSet, width: usize) -> CliResult<()> {
    if let Some(u) = u {
        save_pgm(&dir.join(format!("{tag}_uncertainty.pgm")), &GrayImage::new(u.width, u.height, u.to_gray())?)?;
        fs::write(dir.join(format!("{tag}_uncertainty.csv")), u.to_csv())?;
    }
    for b in 0..4 {
        fs::write(dir.join(format!("{tag}_p{}.csv", b + 1)), orders.to_csv(b, width))?;
    }
    Ok(())
}

/// Writes `embed_*` (patch-embedded features) and `<block>_*` dumps for
/// sample 0, plus `branch_norms.csv`. Returns the labels dumped.
pub fn inspect(net: &Network, image_path: &Path, out: &Path) -> CliResult<Vec<String>> {
    let img = load_pgm(image_path)?;
    let images = Tensor::new(&[1, 1, img.height, img.width], img.to_unit())?;
    let (g, _, result) = net.run(&images, false)?;
    fs::create_dir_all(out)?;
    let mut labels = Vec::new();

    let e = g.value(result.embed);
    let (h, w) = (e.shape()[1], e.shape()[2]);
    let u = channel_uncertainty_hwc(e.data(), h, w, net.config().ssm.metric)?;
    dump(out, "embed", Some(&u), &uncertainty_orders(&u, 1)?, w)?;
    labels.push("embed".to_string());

    let mut norms = String::from("block,y1,y2,y3,y4\n");
    for (name, o) in &result.ssm {
        let r = &o.routing[0];
        dump(out, name, r.uncertainty.as_ref(), &r.orders, g.shape(o.y)[2])?;
        let [a, b, c, d] = o.branch_norms(&g);
        let _ = writeln!(norms, "{name},{a},{b},{c},{d}");
        labels.push(name.clone());
    }
    fs::write(out.join("branch_norms.csv"), norms)?;
    Ok(labels)
}
