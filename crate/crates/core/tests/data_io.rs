use ctxmat::error::FormatErrorKind;
use ctxmat::io::container::TensorContainer;
use ctxmat::io::labels::{label_map_from_bytes, label_map_to_bytes};
use ctxmat::io::ppm::{decode_ppm, encode_ppm, label_map_rgb, Legend, PALETTE, UNLABELED_COLOR};
use ctxmat::maps::LabelMap;
use ctxmat::{Error, Tensor};

fn kind<T: std::fmt::Debug>(r: ctxmat::Result<T>) -> FormatErrorKind {
    match r {
        Err(Error::Format { kind, .. }) => kind,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn container_layout_is_byte_exact() {
    let mut c = TensorContainer::new();
    c.push("a", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap());
    c.push("b", Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let bytes = c.to_bytes().unwrap();
    let header = br#"{"dtype":"f64","entries":[{"name":"a","shape":[2],"offset":0,"length":16},{"name":"b","shape":[1,1],"offset":16,"length":8}]}"#;
    let mut want = b"CTXF1".to_vec();
    want.extend_from_slice(&(header.len() as u64).to_le_bytes());
    want.extend_from_slice(header);
    for v in [1.0f64, -2.5, 0.5] {
        want.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(bytes, want);
    assert_eq!(TensorContainer::from_bytes(&bytes).unwrap(), c);
}

#[test]
fn container_keeps_categories_and_special_values() {
    let mut c = TensorContainer::new();
    c.push("x", Tensor::new(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1e308, f64::EPSILON]).unwrap());
    c.categories = Some(vec!["glass".into(), "wood".into()]);
    let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert!(back.get("x").unwrap().bit_eq(c.get("x").unwrap()));
    assert_eq!(back.categories, c.categories);
}

#[test]
fn container_errors() {
    let mut c = TensorContainer::new();
    c.push("a", Tensor::full(&[3], 1.0));
    let bytes = c.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(kind(TensorContainer::from_bytes(&bad)), FormatErrorKind::BadMagic);
    assert_eq!(kind(TensorContainer::from_bytes(&bytes[..9])), FormatErrorKind::TruncatedPayload);
    assert_eq!(kind(TensorContainer::from_bytes(&bytes[..bytes.len() - 1])), FormatErrorKind::TruncatedPayload);
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert_eq!(kind(TensorContainer::from_bytes(&long)), FormatErrorKind::LengthMismatch);

    let header = br#"{"dtype":"f64","entries":[{"name":"a","shape":[2],"offset":0,"length":24}]}"#;
    let mut lying = b"CTXF1".to_vec();
    lying.extend_from_slice(&(header.len() as u64).to_le_bytes());
    lying.extend_from_slice(header);
    lying.extend_from_slice(&[0; 24]);
    assert_eq!(kind(TensorContainer::from_bytes(&lying)), FormatErrorKind::LengthMismatch);

    let mut junk = b"CTXF1".to_vec();
    junk.extend_from_slice(&3u64.to_le_bytes());
    junk.extend_from_slice(b"{{{");
    assert_eq!(kind(TensorContainer::from_bytes(&junk)), FormatErrorKind::MalformedHeader);
}

#[test]
fn label_layout_is_byte_exact() {
    let map = LabelMap::new(2, 3, vec![0, 1, 2, LabelMap::UNLABELED, 15, 7]).unwrap();
    let bytes = label_map_to_bytes(&map);
    let mut want = b"CTXL1".to_vec();
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&3u32.to_le_bytes());
    for l in [0u16, 1, 2, 65535, 15, 7] {
        want.extend_from_slice(&l.to_le_bytes());
    }
    assert_eq!(bytes, want);
    assert_eq!(label_map_from_bytes(&bytes).unwrap(), map);
}

#[test]
fn all_unlabeled_map_round_trips() {
    let map = LabelMap::unlabeled(4, 5);
    let back = label_map_from_bytes(&label_map_to_bytes(&map)).unwrap();
    assert_eq!(back, map);
    assert_eq!(back.labeled_count(), 0);
}

#[test]
fn label_errors() {
    let bytes = label_map_to_bytes(&LabelMap::filled(2, 2, 1));
    assert_eq!(kind(label_map_from_bytes(b"CTXF1")), FormatErrorKind::BadMagic);
    assert_eq!(kind(label_map_from_bytes(&bytes[..10])), FormatErrorKind::TruncatedPayload);
    assert_eq!(kind(label_map_from_bytes(&bytes[..bytes.len() - 2])), FormatErrorKind::TruncatedPayload);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(kind(label_map_from_bytes(&long)), FormatErrorKind::LengthMismatch);
}

#[test]
fn ppm_header_and_palette() {
    let bytes = encode_ppm(2, 1, &[1, 2, 3, 4, 5, 6]);
    assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
    assert_eq!(decode_ppm(&bytes).unwrap(), (2, 1, vec![1, 2, 3, 4, 5, 6]));
    let map = LabelMap::new(1, 2, vec![3, LabelMap::UNLABELED]).unwrap();
    let rgb = label_map_rgb(&map);
    assert_eq!(&rgb[..3], &PALETTE[3]);
    assert_eq!(&rgb[3..], &UNLABELED_COLOR);
    let legend = Legend::new(&["a".into(), "b".into()]);
    let json = serde_json::to_value(&legend).unwrap();
    assert_eq!(json["classes"][1]["name"], "b");
}
