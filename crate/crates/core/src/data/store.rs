//! On-disk layout:
//!
//! ```text
//! DIR/manifest.txt
//! DIR/train/000000.ppm   binary P6, 8-bit RGB
//! DIR/train/000000.txt   one `class_id cx cy w h` line per object, normalized
//! DIR/val/...
//! ```
//!
//! The manifest checksum is the CRC-32 of every member's PPM bytes followed by
//! its label bytes, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{generate_dataset, ClassSizes, Sample, SceneSpec, SizeRange, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub checksum: u32,
    /// `split/stem` entries, train first.
    pub members: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Non-fatal problems such as a checksum mismatch.
    pub warnings: Vec<String>,
}

fn member_name(split: &str, i: usize) -> String {
    format!("{split}/{i:06}")
}

fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let e = image.extents();
    let (h, w) = (e[1], e[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.at(&[c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::data(path, m);
    // header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty PPM raster"));
    }
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == 3 * w * h)
        .ok_or_else(|| bad("PPM raster size mismatch"))?;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        raster[rest * 3 + c] as f32 / 255.0
    }))
}

fn encode_labels(labels: &[GroundTruth], size: usize) -> Vec<u8> {
    let s = size as f64;
    let mut out = String::new();
    for g in labels {
        let (cx, cy) = g.bbox.center();
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            g.class_id,
            cx / s,
            cy / s,
            g.bbox.width() / s,
            g.bbox.height() / s
        ));
    }
    out.into_bytes()
}

fn decode_labels(text: &str, size: usize, image_id: usize, path: &Path) -> Result<Vec<GroundTruth>> {
    let s = size as f64;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |m: &str| Error::data(path, format!("line {}: {m}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected `class_id cx cy w h`"));
            }
            let class_id: usize = f[0].parse().map_err(|_| bad("bad class id"))?;
            if class_id >= NUM_CLASSES {
                return Err(bad("class id out of range"));
            }
            let v: Vec<f64> = f[1..].iter().map(|x| x.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(bad("normalized value outside [0, 1]"));
            }
            Ok(GroundTruth {
                bbox: BBox::from_center(v[0] * s, v[1] * s, v[2] * s, v[3] * s),
                class_id,
                image_id,
            })
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::data(path, "missing file"),
        _ => Error::io(path, e),
    })
}

fn range_str((a, b): (usize, usize)) -> String {
    format!("{a} {b}")
}

impl Manifest {
    fn render(&self) -> String {
        let s = &self.spec;
        let mut out = String::from("# synthetic detection dataset\n");
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("format", FORMAT_VERSION.to_string());
        kv("seed", s.seed.to_string());
        kv("img_size", s.img_size.to_string());
        kv("objects_per_image", range_str(s.objects_per_image));
        kv("small_fraction", s.small_fraction.to_string());
        kv("background", format!("{} {}", s.background.0, s.background.1));
        kv("noise_amplitude", s.noise_amplitude.to_string());
        for (c, z) in s.sizes.iter().enumerate() {
            kv(&format!("sizes.{c}"), [z.small.w, z.small.h, z.large.w, z.large.h].map(range_str).join(" "));
        }
        kv("train", self.n_train.to_string());
        kv("val", self.n_val.to_string());
        kv("checksum", format!("{:08x}", self.checksum));
        for m in &self.members {
            kv("member", m.clone());
        }
        out
    }

    fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut spec = SceneSpec::default();
        let mut n = (None, None);
        let mut checksum = None;
        let mut members = Vec::new();
        let mut sizes_seen = [false; NUM_CLASSES];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::data(path, format!("line {}: {m}", ln + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let nums = |v: &str| -> Result<Vec<f64>> {
                v.split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number in `{k}`"))))
                    .collect()
            };
            let one = |v: &str| -> Result<f64> {
                match nums(v)?[..] {
                    [x] => Ok(x),
                    _ => Err(bad(format!("`{k}` expects one number"))),
                }
            };
            let pair = |v: &str| -> Result<(f64, f64)> {
                match nums(v)?[..] {
                    [a, b] => Ok((a, b)),
                    _ => Err(bad(format!("`{k}` expects two numbers"))),
                }
            };
            match k {
                "format" => {
                    if one(v)? as u32 != FORMAT_VERSION {
                        return Err(bad(format!("unsupported manifest format {v}")));
                    }
                }
                "seed" => spec.seed = v.parse().map_err(|_| bad("bad seed".into()))?,
                "img_size" => spec.img_size = one(v)? as usize,
                "objects_per_image" => {
                    let (a, b) = pair(v)?;
                    spec.objects_per_image = (a as usize, b as usize);
                }
                "small_fraction" => spec.small_fraction = one(v)?,
                "background" => spec.background = pair(v)?,
                "noise_amplitude" => spec.noise_amplitude = one(v)?,
                "train" => n.0 = Some(one(v)? as usize),
                "val" => n.1 = Some(one(v)? as usize),
                "checksum" => checksum = Some(u32::from_str_radix(v, 16).map_err(|_| bad("bad checksum".into()))?),
                "member" => members.push(v.to_string()),
                _ if k.starts_with("sizes.") => {
                    let c: usize = k[6..]
                        .parse()
                        .ok()
                        .filter(|&c| c < NUM_CLASSES)
                        .ok_or_else(|| bad(format!("unknown key `{k}`")))?;
                    let x: Vec<usize> = nums(v)?.into_iter().map(|x| x as usize).collect();
                    if x.len() != 8 {
                        return Err(bad(format!("`{k}` expects eight numbers")));
                    }
                    let r = |i: usize| SizeRange {
                        w: (x[i], x[i + 1]),
                        h: (x[i + 2], x[i + 3]),
                    };
                    spec.sizes[c] = ClassSizes { small: r(0), large: r(4) };
                    sizes_seen[c] = true;
                }
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        let (Some(n_train), Some(n_val), Some(checksum)) = (n.0, n.1, checksum) else {
            return Err(Error::data(path, "manifest lacks train/val counts or checksum"));
        };
        if sizes_seen.contains(&false) {
            return Err(Error::data(path, "manifest lacks per-class size ranges"));
        }
        let expected: Vec<String> = (0..n_train)
            .map(|i| member_name("train", i))
            .chain((0..n_val).map(|i| member_name("val", i)))
            .collect();
        if members != expected {
            return Err(Error::data(path, "member list does not match split counts"));
        }
        Ok(Manifest {
            spec,
            n_train,
            n_val,
            checksum,
            members,
        })
    }
}

/// Generates the dataset for `spec` and writes it under `dir`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, n_train: usize, n_val: usize) -> Result<Manifest> {
    let (train, val) = generate_dataset(spec, n_train, n_val)?;
    let mut hasher = crc32fast::Hasher::new();
    let mut members = Vec::new();
    for (split, samples) in [("train", &train), ("val", &val)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in samples.iter().enumerate() {
            let name = member_name(split, i);
            let ppm = encode_ppm(&s.image);
            let labels = encode_labels(&s.labels, spec.img_size);
            write_file(&dir.join(format!("{name}.ppm")), &ppm)?;
            write_file(&dir.join(format!("{name}.txt")), &labels)?;
            hasher.update(&ppm);
            hasher.update(&labels);
            members.push(name);
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        n_train,
        n_val,
        checksum: hasher.finalize(),
        members,
    };
    write_file(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read_file(&mpath)?).map_err(|_| Error::data(&mpath, "manifest is not UTF-8"))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let size = manifest.spec.img_size;
    let mut hasher = crc32fast::Hasher::new();
    let mut splits: [Vec<Sample>; 2] = [Vec::new(), Vec::new()];
    for (k, name) in manifest.members.iter().enumerate() {
        let (split, image_id) = if k < manifest.n_train { (0, k) } else { (1, k - manifest.n_train) };
        let ppm_path: PathBuf = dir.join(format!("{name}.ppm"));
        let txt_path: PathBuf = dir.join(format!("{name}.txt"));
        let ppm = read_file(&ppm_path)?;
        let txt = read_file(&txt_path)?;
        hasher.update(&ppm);
        hasher.update(&txt);
        let image = decode_ppm(&ppm, &ppm_path)?;
        if image.extents() != [3, size, size] {
            return Err(Error::data(&ppm_path, format!("expected a {size}×{size} image")));
        }
        let text = std::str::from_utf8(&txt).map_err(|_| Error::data(&txt_path, "labels are not UTF-8"))?;
        splits[split].push(Sample {
            image,
            labels: decode_labels(text, size, image_id, &txt_path)?,
            placement_failures: 0,
        });
    }
    let mut warnings = Vec::new();
    let actual = hasher.finalize();
    if actual != manifest.checksum {
        warnings.push(format!(
            "{}: checksum mismatch (manifest {:08x}, contents {actual:08x})",
            mpath.display(),
            manifest.checksum
        ));
    }
    let [train, val] = splits;
    Ok(Dataset {
        manifest,
        train,
        val,
        warnings,
    })
}
