//! Named architectures: the desk-scale cascade nets and the published
//! teacher/student family (224x224 input, 40 attributes, 32 maps each).

use super::{LayerSpec, NetworkSpec};

pub const DESK_IMAGE: usize = 64;
pub const FULL_IMAGE: usize = 224;
pub const FULL_ATTRIBUTES: usize = 40;
pub const FULL_BRANCH_MAPS: usize = 32;

fn conv(k: usize, c: usize) -> LayerSpec {
    LayerSpec::conv(k, c, 1)
}

/// Localization/teacher net: 3x3 trunk convs 8-16-32 with three pools,
/// then two 1x1 convs (128 wide, then `m * n` branch maps) at 1/8
/// resolution. The 1x1 top keeps each heatmap cell tied to a small image
/// neighbourhood.
pub fn desk_frl(m: usize, n: usize) -> NetworkSpec {
    NetworkSpec {
        name: "frl-desk".into(),
        input: (3, DESK_IMAGE, DESK_IMAGE),
        layers: vec![
            conv(3, 8),
            LayerSpec::pool(2),
            conv(3, 16),
            LayerSpec::pool(2),
            conv(3, 32),
            LayerSpec::pool(2),
            conv(1, 128),
            conv(1, m * n),
            LayerSpec::gap(),
            LayerSpec::group_fc(),
        ],
        attribute_count: m,
        branch_maps: n,
    }
}

/// All-3x3 variant with trunk 8-16-32-64 and four pools (1/16 resolution).
pub fn desk_frl_four_pool(m: usize, n: usize) -> NetworkSpec {
    NetworkSpec {
        name: "frl-desk-4pool".into(),
        input: (3, DESK_IMAGE, DESK_IMAGE),
        layers: vec![
            conv(3, 8),
            LayerSpec::pool(2),
            conv(3, 16),
            LayerSpec::pool(2),
            conv(3, 32),
            LayerSpec::pool(2),
            conv(3, 64),
            LayerSpec::pool(2),
            conv(3, m * n),
            LayerSpec::gap(),
            LayerSpec::group_fc(),
        ],
        attribute_count: m,
        branch_maps: n,
    }
}

/// Compact whole-image subnet: the teacher trunk at half width and a 1x1
/// conv to `m * n` maps, so its last conv matches the teacher's hint layer.
pub fn desk_student(m: usize, n: usize) -> NetworkSpec {
    NetworkSpec {
        name: "student-desk".into(),
        input: (3, DESK_IMAGE, DESK_IMAGE),
        layers: vec![
            conv(3, 4),
            LayerSpec::pool(2),
            conv(3, 8),
            LayerSpec::pool(2),
            conv(3, 16),
            LayerSpec::pool(2),
            conv(1, m * n),
            LayerSpec::gap(),
            LayerSpec::group_fc(),
        ],
        attribute_count: m,
        branch_maps: n,
    }
}

/// Student with a dense (biased) classifier after GAP.
pub fn desk_student_dense(m: usize, n: usize) -> NetworkSpec {
    let mut spec = desk_student(m, n);
    spec.name = "student-desk-dense".into();
    *spec.layers.last_mut().unwrap() = LayerSpec::fc(m);
    spec
}

fn full_scale(name: &str, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec {
        name: name.into(),
        input: (3, FULL_IMAGE, FULL_IMAGE),
        layers,
        attribute_count: FULL_ATTRIBUTES,
        branch_maps: FULL_BRANCH_MAPS,
    }
}

fn vgg_like(widths: [usize; 5], repeats: [usize; 5], tail: &[(usize, usize)]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, (&c, &r)) in widths.iter().zip(&repeats).enumerate() {
        layers.push(LayerSpec::conv(3, c, r));
        if i < 4 {
            layers.push(LayerSpec::pool(2));
        }
    }
    for &(k, c) in tail {
        layers.push(conv(k, c));
    }
    layers.push(LayerSpec::gap());
    layers.push(LayerSpec::group_fc());
    layers
}

pub fn published_tnet() -> NetworkSpec {
    full_scale("tnet", vgg_like([32, 64, 128, 256, 512], [2, 2, 3, 3, 3], &[(3, 1280)]))
}

pub fn published_snet1() -> NetworkSpec {
    full_scale("snet1", vgg_like([32, 64, 128, 256, 512], [1; 5], &[(3, 1280)]))
}

pub fn published_snet2() -> NetworkSpec {
    full_scale("snet2", vgg_like([32, 64, 128, 256, 512], [1; 5], &[(1, 1280)]))
}

pub fn published_snet3() -> NetworkSpec {
    let mut layers = Vec::new();
    for c in [16, 32, 64, 128] {
        layers.push(conv(3, c));
        layers.push(LayerSpec::pool(2));
    }
    layers.push(conv(1, 1280));
    layers.push(LayerSpec::gap());
    layers.push(LayerSpec::group_fc());
    full_scale("snet3", layers)
}

/// Published parameter counts for the teacher/student family.
pub const PUBLISHED_COUNTS: [(&str, f64); 4] = [
    ("tnet", 19.0e6),
    ("snet1", 6.0e6),
    ("snet2", 2.0e6),
    ("snet3", 0.27e6),
];

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 8] = [
    "frl-desk",
    "frl-desk-4pool",
    "student-desk",
    "student-desk-dense",
    "tnet",
    "snet1",
    "snet2",
    "snet3",
];

pub fn by_name(name: &str, m: usize, n: usize) -> Option<NetworkSpec> {
    Some(match name {
        "frl-desk" => desk_frl(m, n),
        "frl-desk-4pool" => desk_frl_four_pool(m, n),
        "student-desk" => desk_student(m, n),
        "student-desk-dense" => desk_student_dense(m, n),
        "tnet" => published_tnet(),
        "snet1" => published_snet1(),
        "snet2" => published_snet2(),
        "snet3" => published_snet3(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::count_params;

    #[test]
    fn published_family_is_well_formed() {
        for spec in [published_tnet(), published_snet1(), published_snet2(), published_snet3()] {
            spec.validate(true).unwrap();
        }
    }

    #[test]
    fn snet3_grouped_count() {
        // 448 + 4640 + 18496 + 73856 + 165120 + 1280
        assert_eq!(count_params(&published_snet3()).unwrap(), 263_840);
    }

    #[test]
    fn tnet_count() {
        assert_eq!(count_params(&published_tnet()).unwrap(), 13_710_496);
    }
}
