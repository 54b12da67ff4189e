//! Writes the configuration of every reproduction case to `configs/`.

use std::path::{Path, PathBuf};

use krnet_cli::repro::{case_points, CASES};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    std::fs::create_dir_all(&dir).expect("create config dir");
    for case in CASES {
        let out = Path::new("runs").join(case);
        for p in case_points(case, 0, &out).expect("pinned case") {
            let name = format!("{case}_{}_{}.json", krnet_cli::repro::slug(p.variant), p.label.replace('=', ""));
            p.config.save(&dir.join(&name)).expect("write config");
            println!("{}", dir.join(name).display());
        }
    }
}
