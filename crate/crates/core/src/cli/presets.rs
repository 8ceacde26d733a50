/// Built-in experiment configurations; each is also a file under `presets/`.
pub const PRESETS: &[(&str, &str)] = &[
    ("occupancy-sweep", include_str!("../../presets/occupancy-sweep.conf")),
    ("array-scale", include_str!("../../presets/array-scale.conf")),
    ("parallel-writes", include_str!("../../presets/parallel-writes.conf")),
    ("flusher-ab-aligned", include_str!("../../presets/flusher-ab-aligned.conf")),
    ("flusher-ab-unaligned", include_str!("../../presets/flusher-ab-unaligned.conf")),
    ("mixed-ratio-sweep", include_str!("../../presets/mixed-ratio-sweep.conf")),
    ("zipfian-writeback", include_str!("../../presets/zipfian-writeback.conf")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
