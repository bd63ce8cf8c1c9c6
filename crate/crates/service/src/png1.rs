use fdrn_core::BinaryMask;

/// Lossless 1-bit grayscale PNG of a mask (foreground white).
pub fn encode_png(mask: &BinaryMask) -> Result<Vec<u8>, png::EncodingError> {
    let (h, w) = mask.dims();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for ((r, c), &v) in mask.data().indexed_iter() {
        if v {
            packed[r * stride + c / 8] |= 0x80 >> (c % 8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&packed)?;
    }
    Ok(out)
}

/// Inverse of [`encode_png`].
pub fn decode_png(bytes: &[u8]) -> Result<BinaryMask, png::DecodingError> {
    let mut reader = png::Decoder::new(bytes).read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    Ok(BinaryMask::from_fn(h, w, |(r, c)| buf[r * stride + c / 8] & (0x80 >> (c % 8)) != 0))
}
