//! Named experiment presets compiled into the binary from `presets/`.

/// `(name, document)` for every preset.
pub const PRESETS: &[(&str, &str)] = &[
    ("base", include_str!("../presets/base.toml")),
    ("layer-ablation", include_str!("../presets/layer-ablation.toml")),
    ("method-sweep", include_str!("../presets/method-sweep.toml")),
    ("multi-turn", include_str!("../presets/multi-turn.toml")),
    ("smoke-stability", include_str!("../presets/smoke-stability.toml")),
    ("tiny", include_str!("../presets/tiny.toml")),
    ("training-smoke", include_str!("../presets/training-smoke.toml")),
];

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}
