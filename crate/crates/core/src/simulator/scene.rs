use crate::cloud::SemanticClassMap;
use crate::error::{PctError, Result};

pub const MAX_PRIMITIVES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Infinite horizontal plane at height `z`.
    Plane { z: f64 },
    /// Axis-aligned box given by center and edge lengths.
    Box { center: [f64; 3], size: [f64; 3] },
    /// Vertical cylinder standing on `base` (x, y, bottom z).
    Cylinder { base: [f64; 3], radius: f64, height: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class_id: u32,
    /// Diffuse reflectance in `[0, 1]`.
    pub reflectance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    primitives: Vec<Primitive>,
}

fn positive(name: &str, v: f64) -> std::result::Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive, got {v}"))
    }
}

impl Primitive {
    fn check(&self, map: &SemanticClassMap) -> std::result::Result<(), String> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self.shape {
            Shape::Plane { z } if !z.is_finite() => return Err("plane height must be finite".into()),
            Shape::Plane { .. } => {}
            Shape::Box { center, size } => {
                if !finite(&center) {
                    return Err("box center must be finite".into());
                }
                for (axis, s) in ["width", "depth", "height"].iter().zip(size) {
                    positive(&format!("box {axis}"), s)?;
                }
            }
            Shape::Cylinder { base, radius, height } => {
                if !finite(&base) {
                    return Err("cylinder base must be finite".into());
                }
                positive("cylinder radius", radius)?;
                positive("cylinder height", height)?;
            }
            Shape::Sphere { center, radius } => {
                if !finite(&center) {
                    return Err("sphere center must be finite".into());
                }
                positive("sphere radius", radius)?;
            }
        }
        if !map.contains(self.class_id) {
            return Err(format!("class id {} is not in the class map", self.class_id));
        }
        if !(0.0..=1.0).contains(&self.reflectance) {
            return Err(format!("reflectance {} outside [0, 1]", self.reflectance));
        }
        Ok(())
    }
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, map: &SemanticClassMap) -> Result<Self> {
        if primitives.len() > MAX_PRIMITIVES {
            return Err(PctError::parameter(
                "scene",
                format!("{} primitives exceed the limit of {MAX_PRIMITIVES}", primitives.len()),
            ));
        }
        for (i, p) in primitives.iter().enumerate() {
            p.check(map).map_err(|reason| PctError::parameter(format!("primitive {i}"), reason))?;
        }
        Ok(Self { primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// Parses a scene description, one primitive per line:
///
/// ```text
/// plane    <z> <class> <reflectance>
/// box      <cx> <cy> <cz> <sx> <sy> <sz> <class> <reflectance>
/// cylinder <cx> <cy> <z0> <radius> <height> <class> <reflectance>
/// sphere   <cx> <cy> <cz> <radius> <class> <reflectance>
/// ```
///
/// `<class>` is a numeric id or a class name from `map`. Blank lines and
/// text after `#` are ignored.
pub fn build_scene(text: &str, map: &SemanticClassMap) -> Result<Scene> {
    let mut primitives = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| PctError::Parse { line, message };
        let fields: Vec<&str> = content.split_whitespace().collect();
        let (keyword, args) = (fields[0], &fields[1..]);
        let arity = match keyword {
            "plane" => 3,
            "box" => 8,
            "cylinder" => 7,
            "sphere" => 6,
            other => return Err(err(format!("unknown shape `{other}`"))),
        };
        if args.len() != arity {
            return Err(err(format!("`{keyword}` takes {arity} fields, found {}", args.len())));
        }
        let nums = args[..arity - 2]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        let class_text = args[arity - 2];
        let class_id = match class_text.parse::<u32>() {
            Ok(id) => id,
            Err(_) => map
                .id_of(class_text)
                .ok_or_else(|| err(format!("unknown class `{class_text}`")))?,
        };
        let reflectance = args[arity - 1]
            .parse::<f64>()
            .map_err(|_| err(format!("`{}` is not a number", args[arity - 1])))?;
        let shape = match keyword {
            "plane" => Shape::Plane { z: nums[0] },
            "box" => Shape::Box {
                center: [nums[0], nums[1], nums[2]],
                size: [nums[3], nums[4], nums[5]],
            },
            "cylinder" => Shape::Cylinder {
                base: [nums[0], nums[1], nums[2]],
                radius: nums[3],
                height: nums[4],
            },
            _ => Shape::Sphere {
                center: [nums[0], nums[1], nums[2]],
                radius: nums[3],
            },
        };
        let p = Primitive {
            shape,
            class_id,
            reflectance,
        };
        p.check(map).map_err(err)?;
        primitives.push(p);
        if primitives.len() > MAX_PRIMITIVES {
            return Err(err(format!("more than {MAX_PRIMITIVES} primitives")));
        }
    }
    Ok(Scene { primitives })
}
