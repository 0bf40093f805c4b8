//! Versioned, checksummed container for trained pipelines.
//!
//! Layout: a `GUSLDH <version>` header line, a manifest of section names,
//! length-prefixed text sections (DCP parameters, the optional omega forest,
//! the Saab cascade, one block per level), and a trailing SHA-256 over every
//! preceding byte. All reals are decimal with 17 significant digits, so a
//! load/save cycle is byte-identical and predictions round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dcp::DcpParams;
use crate::error::{Error, Result};
use crate::lnt::LntTransform;
use crate::saab::{HopConfig, KeptFilters, SaabBank, SaabCascade};
use crate::trees::{EnsembleMode, Node, TreeEnsembleModel};
use crate::ushape::{LevelModel, UShapeModel, MODEL_FORMAT_VERSION};

const MAGIC: &str = "GUSLDH";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// writing

struct Body(String);

impl Body {
    fn new() -> Self {
        Body(String::new())
    }

    fn line(&mut self, text: &str) {
        self.0.push_str(text);
        self.0.push('\n');
    }

    fn kv_f(&mut self, key: &str, v: f64) {
        let _ = writeln!(self.0, "{key} {}", fmt_f64(v));
    }

    fn kv_u(&mut self, key: &str, v: usize) {
        let _ = writeln!(self.0, "{key} {v}");
    }

    fn floats(&mut self, key: &str, values: &[f64]) {
        self.0.push_str(key);
        for v in values {
            self.0.push(' ');
            self.0.push_str(&fmt_f64(*v));
        }
        self.0.push('\n');
    }
}

fn node_count(node: &Node) -> usize {
    match node {
        Node::Leaf { .. } => 1,
        Node::Internal { left, right, .. } => 1 + node_count(left) + node_count(right),
    }
}

fn write_node(body: &mut Body, node: &Node) {
    match node {
        Node::Leaf { weight } => body.line(&format!("L {}", fmt_f64(*weight))),
        Node::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            body.line(&format!("I {feature} {}", fmt_f64(*threshold)));
            write_node(body, left);
            write_node(body, right);
        }
    }
}

fn write_ensemble(body: &mut Body, model: &TreeEnsembleModel) {
    body.line(match model.mode {
        EnsembleMode::Boosted => "mode boosted",
        EnsembleMode::Bagged => "mode bagged",
    });
    body.kv_f("base_score", model.base_score);
    body.kv_f("eta", model.eta);
    body.kv_u("feature_dim", model.feature_dim);
    body.kv_u("trees", model.trees.len());
    for tree in &model.trees {
        body.kv_u("tree", node_count(tree));
        write_node(body, tree);
    }
}

fn write_lnt(body: &mut Body, lnt: &LntTransform) {
    body.kv_u("out_dim", lnt.out_dim);
    body.kv_u("in_dim", lnt.in_dim);
    for r in 0..lnt.out_dim {
        body.floats("a", &lnt.a_matrix[r * lnt.in_dim..(r + 1) * lnt.in_dim]);
    }
    body.floats("bias", &lnt.b_bias);
    body.floats("mean", &lnt.x_mean);
    body.floats("edges", &lnt.bin_edges);
}

fn write_bank(body: &mut Body, bank: &SaabBank) {
    body.kv_u("spatial", bank.spatial_size);
    body.kv_u("in_channels", bank.in_channels);
    body.kv_u("ac_count", bank.ac_count());
    body.kv_f("dc_variance", bank.dc_variance);
    body.kv_f("residual_variance", bank.residual_variance);
    let d = bank.patch_dim();
    for l in 0..bank.ac_count() {
        body.floats("acvec", &bank.ac_vectors[l * d..(l + 1) * d]);
    }
    body.floats("biases", &bank.biases);
    body.floats("energies", &bank.energies);
}

fn write_cascade(body: &mut Body, cascade: &SaabCascade) {
    body.kv_u("hops", cascade.hops.len());
    for (cfg, bank) in &cascade.hops {
        body.kv_u("window", cfg.window);
        body.kv_u("filter", cfg.filter);
        body.kv_u("pool", cfg.pool);
        match cfg.kept {
            KeptFilters::Count(k) => body.line(&format!("kept count {k}")),
            KeptFilters::Energy(t) => body.line(&format!("kept energy {}", fmt_f64(t))),
        }
        match cfg.max_filters {
            Some(m) => body.kv_u("max_filters", m),
            None => body.line("max_filters none"),
        }
        write_bank(body, bank);
    }
}

fn write_level(body: &mut Body, level: &LevelModel) {
    body.kv_u("resolution", level.resolution);
    body.kv_u("hop", level.cascade_hop);
    for ch in 0..3 {
        body.kv_u("channel", ch);
        let selected: Vec<String> = level.rft_selected[ch].iter().map(|v| v.to_string()).collect();
        body.line(&format!(
            "selected {} {}",
            level.rft_selected[ch].len(),
            selected.join(" ")
        ));
        body.kv_f("blend", level.blend[ch]);
        body.kv_u("active", usize::from(level.active[ch]));
        match &level.lnt[ch] {
            Some(lnt) => {
                body.line("lnt present");
                write_lnt(body, lnt);
            }
            None => body.line("lnt absent"),
        }
        body.line("raw-regressor");
        write_ensemble(body, &level.regressor_raw[ch]);
        match &level.regressor_lnt[ch] {
            Some(reg) => {
                body.line("lnt-regressor present");
                write_ensemble(body, reg);
            }
            None => body.line("lnt-regressor absent"),
        }
    }
}

/// Serializes the model to its container bytes.
pub fn model_to_bytes(model: &UShapeModel) -> Vec<u8> {
    let mut sections: Vec<(String, String)> = Vec::new();

    let mut header = Body::new();
    header.kv_u("input_size", model.input_size);
    header.kv_u("levels", model.levels.len());
    sections.push(("pipeline".into(), header.0));

    let mut dcp = Body::new();
    dcp.kv_f("omega", model.dcp_params.omega);
    dcp.kv_f("t0", model.dcp_params.t0);
    dcp.kv_u("patch_radius", model.dcp_params.patch_radius);
    dcp.kv_f("bright_fraction", model.dcp_params.bright_fraction);
    dcp.kv_u("gf_radius", model.dcp_params.gf_radius);
    dcp.kv_f("gf_eps", model.dcp_params.gf_eps);
    sections.push(("dcp-params".into(), dcp.0));

    if let Some(forest) = &model.omega_model {
        let mut body = Body::new();
        write_ensemble(&mut body, forest);
        sections.push(("omega-forest".into(), body.0));
    }

    let mut cascade = Body::new();
    write_cascade(&mut cascade, &model.cascade);
    sections.push(("saab-cascade".into(), cascade.0));

    for (i, level) in model.levels.iter().enumerate() {
        let mut body = Body::new();
        write_level(&mut body, level);
        sections.push((format!("level-{i}"), body.0));
    }

    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {}", model.version);
    let manifest: String = sections
        .iter()
        .map(|(name, _)| format!("{name}\n"))
        .collect();
    let _ = writeln!(out, "@section manifest {}", manifest.len());
    out.push_str(&manifest);
    for (name, body) in &sections {
        let _ = writeln!(out, "@section {name} {}", body.len());
        out.push_str(body);
    }
    let mut hasher = Sha256::new();
    hasher.update(out.as_bytes());
    let digest = hasher.finalize();
    let _ = writeln!(out, "@checksum sha256 {}", hex_encode(&digest));
    out.into_bytes()
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn save_model(model: &UShapeModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// reading

struct Reader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader {
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::Integrity("unexpected end of section".into()))?;
        self.pos += 1;
        Ok(line)
    }

    /// Next line, split into its key and the remaining tokens; the key must
    /// match.
    fn expect(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut tokens = line.split_whitespace();
        let found = tokens.next().unwrap_or("");
        if found != key {
            return Err(Error::Integrity(format!(
                "expected field '{key}', found '{found}'"
            )));
        }
        Ok(tokens.collect())
    }

    fn expect_f(&mut self, key: &str) -> Result<f64> {
        let tokens = self.expect(key)?;
        parse_f64(tokens.first().copied().unwrap_or(""))
    }

    fn expect_u(&mut self, key: &str) -> Result<usize> {
        let tokens = self.expect(key)?;
        parse_usize(tokens.first().copied().unwrap_or(""))
    }

    fn expect_floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let tokens = self.expect(key)?;
        if tokens.len() != count {
            return Err(Error::Integrity(format!(
                "field '{key}' carries {} values, expected {count}",
                tokens.len()
            )));
        }
        tokens.iter().map(|t| parse_f64(t)).collect()
    }
}

fn parse_f64(token: &str) -> Result<f64> {
    token
        .parse()
        .map_err(|_| Error::Integrity(format!("bad real value '{token}'")))
}

fn parse_usize(token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Integrity(format!("bad integer value '{token}'")))
}

fn read_node(reader: &mut Reader) -> Result<Node> {
    let line = reader.next()?;
    let mut tokens = line.split_whitespace();
    match tokens.next() {
        Some("L") => Ok(Node::Leaf {
            weight: parse_f64(tokens.next().unwrap_or(""))?,
        }),
        Some("I") => {
            let feature = parse_usize(tokens.next().unwrap_or(""))?;
            let threshold = parse_f64(tokens.next().unwrap_or(""))?;
            let left = read_node(reader)?;
            let right = read_node(reader)?;
            Ok(Node::Internal {
                feature,
                threshold,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        other => Err(Error::Integrity(format!(
            "bad tree node tag {other:?}"
        ))),
    }
}

fn read_ensemble(reader: &mut Reader) -> Result<TreeEnsembleModel> {
    let mode = match reader.expect("mode")?.first().copied() {
        Some("boosted") => EnsembleMode::Boosted,
        Some("bagged") => EnsembleMode::Bagged,
        other => return Err(Error::Integrity(format!("bad ensemble mode {other:?}"))),
    };
    let base_score = reader.expect_f("base_score")?;
    let eta = reader.expect_f("eta")?;
    let feature_dim = reader.expect_u("feature_dim")?;
    let n_trees = reader.expect_u("trees")?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let declared = reader.expect_u("tree")?;
        let root = read_node(reader)?;
        if node_count(&root) != declared {
            return Err(Error::Integrity("tree node count mismatch".into()));
        }
        trees.push(root);
    }
    Ok(TreeEnsembleModel {
        mode,
        trees,
        base_score,
        eta,
        feature_dim,
    })
}

fn read_lnt(reader: &mut Reader) -> Result<LntTransform> {
    let out_dim = reader.expect_u("out_dim")?;
    let in_dim = reader.expect_u("in_dim")?;
    let mut a_matrix = Vec::with_capacity(out_dim * in_dim);
    for _ in 0..out_dim {
        a_matrix.extend(reader.expect_floats("a", in_dim)?);
    }
    let b_bias = reader.expect_floats("bias", out_dim)?;
    let x_mean = reader.expect_floats("mean", in_dim)?;
    let bin_edges = reader.expect_floats("edges", out_dim + 1)?;
    Ok(LntTransform {
        a_matrix,
        out_dim,
        in_dim,
        b_bias,
        x_mean,
        bin_edges,
    })
}

fn read_bank(reader: &mut Reader) -> Result<SaabBank> {
    let spatial_size = reader.expect_u("spatial")?;
    let in_channels = reader.expect_u("in_channels")?;
    let ac_count = reader.expect_u("ac_count")?;
    let dc_variance = reader.expect_f("dc_variance")?;
    let residual_variance = reader.expect_f("residual_variance")?;
    let d = spatial_size * spatial_size * in_channels;
    let mut ac_vectors = Vec::with_capacity(ac_count * d);
    for _ in 0..ac_count {
        ac_vectors.extend(reader.expect_floats("acvec", d)?);
    }
    let biases = reader.expect_floats("biases", 1 + ac_count)?;
    let energies = reader.expect_floats("energies", ac_count)?;
    Ok(SaabBank {
        spatial_size,
        in_channels,
        dc_vector: vec![1.0 / (d as f64).sqrt(); d],
        ac_vectors,
        biases,
        energies,
        dc_variance,
        residual_variance,
    })
}

fn read_cascade(reader: &mut Reader) -> Result<SaabCascade> {
    let n = reader.expect_u("hops")?;
    let mut hops = Vec::with_capacity(n);
    for _ in 0..n {
        let window = reader.expect_u("window")?;
        let filter = reader.expect_u("filter")?;
        let pool = reader.expect_u("pool")?;
        let kept_tokens = reader.expect("kept")?;
        let kept = match kept_tokens.as_slice() {
            ["count", k] => KeptFilters::Count(parse_usize(k)?),
            ["energy", t] => KeptFilters::Energy(parse_f64(t)?),
            _ => return Err(Error::Integrity("bad kept-filters spec".into())),
        };
        let max_tokens = reader.expect("max_filters")?;
        let max_filters = match max_tokens.first().copied() {
            Some("none") => None,
            Some(tok) => Some(parse_usize(tok)?),
            None => return Err(Error::Integrity("missing max_filters value".into())),
        };
        let bank = read_bank(reader)?;
        hops.push((
            HopConfig {
                window,
                filter,
                pool,
                kept,
                max_filters,
            },
            bank,
        ));
    }
    Ok(SaabCascade { hops })
}

fn read_level(reader: &mut Reader) -> Result<LevelModel> {
    let resolution = reader.expect_u("resolution")?;
    let cascade_hop = reader.expect_u("hop")?;
    let mut rft_selected: [Vec<usize>; 3] = Default::default();
    let mut lnt: [Option<LntTransform>; 3] = Default::default();
    let mut regressor_raw: Vec<TreeEnsembleModel> = Vec::with_capacity(3);
    let mut regressor_lnt: [Option<TreeEnsembleModel>; 3] = Default::default();
    let mut blend = [1.0; 3];
    let mut active = [true; 3];
    for ch in 0..3 {
        let declared = reader.expect_u("channel")?;
        if declared != ch {
            return Err(Error::Integrity("channel blocks out of order".into()));
        }
        let tokens = reader.expect("selected")?;
        let count = parse_usize(tokens.first().copied().unwrap_or(""))?;
        if tokens.len() != count + 1 {
            return Err(Error::Integrity("selected index count mismatch".into()));
        }
        rft_selected[ch] = tokens[1..]
            .iter()
            .map(|t| parse_usize(t))
            .collect::<Result<_>>()?;
        blend[ch] = reader.expect_f("blend")?;
        active[ch] = reader.expect_u("active")? != 0;
        lnt[ch] = match reader.expect("lnt")?.first().copied() {
            Some("present") => Some(read_lnt(reader)?),
            Some("absent") => None,
            other => return Err(Error::Integrity(format!("bad lnt marker {other:?}"))),
        };
        reader.expect("raw-regressor")?;
        regressor_raw.push(read_ensemble(reader)?);
        regressor_lnt[ch] = match reader.expect("lnt-regressor")?.first().copied() {
            Some("present") => Some(read_ensemble(reader)?),
            Some("absent") => None,
            other => return Err(Error::Integrity(format!("bad lnt-regressor marker {other:?}"))),
        };
    }
    Ok(LevelModel {
        resolution,
        cascade_hop,
        rft_selected,
        lnt,
        regressor_raw: regressor_raw
            .try_into()
            .map_err(|_| Error::Integrity("missing channel regressor".into()))?,
        regressor_lnt,
        blend,
        active,
    })
}

/// Parses and verifies a serialized model.
pub fn model_from_bytes(bytes: &[u8]) -> Result<UShapeModel> {
    // verify the trailing whole-file checksum before trusting anything
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Integrity("model file is not valid UTF-8".into()))?;
    let marker = "@checksum sha256 ";
    let marker_pos = text
        .rfind(&format!("\n{marker}"))
        .ok_or_else(|| Error::Integrity("missing checksum trailer".into()))?;
    let covered = &bytes[..marker_pos + 1];
    let stated = text[marker_pos + 1 + marker.len()..].trim();
    let mut hasher = Sha256::new();
    hasher.update(covered);
    let actual = hex_encode(&hasher.finalize());
    if stated != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stated {stated}, computed {actual}"
        )));
    }

    let body = &text[..marker_pos + 1];
    let (first_line, mut rest) = body
        .split_once('\n')
        .ok_or_else(|| Error::Integrity("empty model file".into()))?;
    let mut header = first_line.split_whitespace();
    if header.next() != Some(MAGIC) {
        return Err(Error::Integrity("bad magic string".into()));
    }
    let version: u32 = header
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Integrity("missing format version".into()))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }

    // split the length-prefixed sections
    let mut sections: Vec<(String, &str)> = Vec::new();
    while !rest.is_empty() {
        let (line, after) = rest
            .split_once('\n')
            .ok_or_else(|| Error::Integrity("truncated section header".into()))?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("@section") {
            return Err(Error::Integrity(format!("expected section header, got '{line}'")));
        }
        let name = tokens
            .next()
            .ok_or_else(|| Error::Integrity("section header without name".into()))?;
        let len = parse_usize(tokens.next().unwrap_or(""))?;
        if after.len() < len {
            return Err(Error::Integrity(format!("section '{name}' truncated")));
        }
        sections.push((name.to_string(), &after[..len]));
        rest = &after[len..];
    }

    let find = |name: &str| -> Result<&str> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, body)| *body)
            .ok_or_else(|| Error::Integrity(format!("missing section '{name}'")))
    };

    let mut reader = Reader::new(find("pipeline")?);
    let input_size = reader.expect_u("input_size")?;
    let n_levels = reader.expect_u("levels")?;

    let mut reader = Reader::new(find("dcp-params")?);
    let dcp_params = DcpParams {
        omega: reader.expect_f("omega")?,
        t0: reader.expect_f("t0")?,
        patch_radius: reader.expect_u("patch_radius")?,
        bright_fraction: reader.expect_f("bright_fraction")?,
        gf_radius: reader.expect_u("gf_radius")?,
        gf_eps: reader.expect_f("gf_eps")?,
    };

    let omega_model = match sections.iter().find(|(n, _)| n == "omega-forest") {
        Some((_, body)) => Some(read_ensemble(&mut Reader::new(body))?),
        None => None,
    };

    let cascade = read_cascade(&mut Reader::new(find("saab-cascade")?))?;

    let mut levels = Vec::with_capacity(n_levels);
    for i in 0..n_levels {
        let body = find(&format!("level-{i}"))?;
        levels.push(read_level(&mut Reader::new(body))?);
    }

    Ok(UShapeModel {
        input_size,
        levels,
        cascade,
        dcp_params,
        omega_model,
        version,
    })
}

pub fn load_model(path: &Path) -> Result<UShapeModel> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_bytes(&bytes)
}
