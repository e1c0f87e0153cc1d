use cpgg_core::export::*;
use cpgg_core::numerics::Rng;
use cpgg_core::phantom::Cine;
use proptest::prelude::*;

fn decode_gif(bytes: &[u8]) -> Vec<(u16, u16, Vec<u8>)> {
    let mut opts = gif::DecodeOptions::new();
    opts.set_color_output(gif::ColorOutput::Indexed);
    let mut d = opts.read_info(bytes).unwrap();
    let palette = d.global_palette().unwrap().to_vec();
    assert_eq!(palette.len(), 768);
    assert!(palette.chunks(3).enumerate().all(|(i, c)| c == [i as u8; 3]));
    let mut frames = Vec::new();
    while let Some(f) = d.read_next_frame().unwrap() {
        frames.push((f.width, f.height, f.buffer.to_vec()));
    }
    frames
}

fn random_cine(t: usize, h: usize, w: usize, seed: u64) -> Cine {
    let mut rng = Rng::new(seed);
    Cine::new(t, h, w, (0..t * h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

#[test]
fn gif_frames_decode_to_quantized_pixels() {
    let c = random_cine(8, 32, 32, 1);
    let mut buf = Vec::new();
    write_gif(&mut buf, &c, 8).unwrap();
    assert_eq!(&buf[..6], b"GIF89a");
    let frames = decode_gif(&buf);
    assert_eq!(frames.len(), 8);
    for (t, (w, h, px)) in frames.iter().enumerate() {
        assert_eq!((*w, *h), (32, 32));
        assert_eq!(px, &frame_bytes(&c, t));
    }
}

#[test]
fn gif_survives_code_table_resets() {
    // 160×160 of noise overflows the 4096-entry table several times.
    let c = random_cine(2, 160, 160, 2);
    let mut buf = Vec::new();
    write_gif(&mut buf, &c, 8).unwrap();
    let frames = decode_gif(&buf);
    assert_eq!(frames[1].2, frame_bytes(&c, 1));
}

#[test]
fn pgm_files_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let c = random_cine(3, 4, 5, 3);
    let files = export_cine(dir.path(), "s0", &c).unwrap();
    assert_eq!(files.len(), 4);
    let pgm = std::fs::read(&files[2]).unwrap();
    assert_eq!(&pgm[..11], b"P5\n5 4\n255\n");
    assert_eq!(&pgm[11..], frame_bytes(&c, 1).as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gif_round_trips_any_levels(h in 1usize..40, w in 1usize..40, levels in 1u32..256, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..2 * h * w).map(|_| (rng.below(levels as usize) as f32) / 255.0).collect();
        let c = Cine::new(2, h, w, data).unwrap();
        let mut buf = Vec::new();
        write_gif(&mut buf, &c, 5).unwrap();
        let frames = decode_gif(&buf);
        prop_assert_eq!(&frames[0].2, &frame_bytes(&c, 0));
        prop_assert_eq!(&frames[1].2, &frame_bytes(&c, 1));
    }
}
