//! `report.json` assembly and CSV sidecars.

use std::path::{Path, PathBuf};

use nisio::{DiscreteGenerator, EigenPair, Sense, Topology};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::{io_err, CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Report {
    dir: PathBuf,
    fields: Map<String, Value>,
    files: Vec<String>,
}

impl Report {
    /// A report without a problem section.
    pub fn bare(command: &str, dir: &Path) -> Self {
        let mut fields = Map::new();
        fields.insert("command".into(), command.into());
        fields.insert("schema_version".into(), SCHEMA_VERSION.into());
        Report { dir: dir.to_path_buf(), fields, files: Vec::new() }
    }

    pub fn new(command: &str, cfg: &Config) -> Self {
        let mut r = Self::bare(command, &cfg.out_dir);
        let p = &cfg.problem;
        let topology = match p.grid.topology() {
            Topology::Interval => "interval",
            Topology::Torus => "torus",
        };
        let sense = match p.sense {
            Sense::Minimize => "minimize",
            Sense::Maximize => "maximize",
        };
        r.set(
            "problem",
            serde_json::json!({
                "topology": topology,
                "d": p.grid.dim(),
                "n": p.grid.points_per_axis(),
                "nodes": p.grid.len(),
                "extent": p.grid.extent(),
                "controls": p.controls.len(),
                "sense": sense,
            }),
        );
        r
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.insert(key.into(), value.into());
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        self.ensure_dir()?;
        let path = self.dir.join(name);
        let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// `phi.csv`: node, coordinates, `φ` and the optimizing control.
    pub fn write_phi(&mut self, gen: &DiscreteGenerator, pair: &EigenPair) -> Result<()> {
        let grid = gen.grid();
        let d = grid.dim();
        let mut header = vec!["node", "x1"];
        if d == 2 {
            header.push("x2");
        }
        header.extend(["phi", "policy"]);
        let rows = (0..grid.len()).map(|i| {
            let x = grid.coords(i);
            let mut row = vec![i.to_string()];
            row.extend(x[..d].iter().map(f64::to_string));
            row.push(pair.phi[i].to_string());
            row.push(pair.policy[i].to_string());
            row
        });
        self.write_csv("phi.csv", &header, rows)
    }

    /// Writes `report.json` and echoes it to stdout.
    pub fn finish(mut self) -> Result<()> {
        self.ensure_dir()?;
        self.fields.insert("files".into(), self.files.clone().into());
        let text = serde_json::to_string_pretty(&Value::Object(self.fields)).expect("JSON values serialize");
        let path = self.dir.join("report.json");
        std::fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
        println!("{text}");
        Ok(())
    }
}
