//! Fixed-size character chunking for guideline documents.
//!
//! Chunks are `size` characters with `overlap` characters shared between
//! neighbours (stride `size - overlap`). Generation stops at the first chunk
//! that reaches the end of the document, so the final chunk may be short but
//! no chunk is ever fully contained in its predecessor. Offsets are in
//! characters, not bytes.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    /// Character offset of the chunk start in the source document.
    pub offset: usize,
    pub text: String,
}

pub fn chunk_text(text: &str, size: usize, overlap: usize) -> Vec<Chunk> {
    assert!(size > 0, "chunk size must be positive");
    assert!(overlap < size, "overlap must be smaller than the chunk size");
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut offset = 0;
    loop {
        let end = (offset + size).min(chars.len());
        chunks.push(Chunk {
            offset,
            text: chars[offset..end].iter().collect(),
        });
        if end == chars.len() {
            break;
        }
        offset += stride;
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_example_2200_chars_two_chunks() {
        let doc: String = "x".repeat(2200);
        let chunks = chunk_text(&doc, 1200, 200);
        assert_eq!(chunks.len(), 2);
        assert_eq!((chunks[0].offset, chunks[0].text.chars().count()), (0, 1200));
        assert_eq!((chunks[1].offset, chunks[1].text.chars().count()), (1000, 1200));
    }

    #[test]
    fn short_document_is_one_chunk() {
        let chunks = chunk_text("brief guideline", 1200, 200);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "brief guideline");
    }

    #[test]
    fn overlap_removal_reconstructs_the_document() {
        let doc: String = (0..5000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let chunks = chunk_text(&doc, 1200, 200);
        let mut rebuilt: String = chunks[0].text.clone();
        for chunk in &chunks[1..] {
            rebuilt.extend(chunk.text.chars().skip(200));
        }
        assert_eq!(rebuilt, doc);
    }

    #[test]
    fn multibyte_text_chunks_on_char_boundaries() {
        let doc: String = "σπασμός ".repeat(400); // 3200 chars, multibyte
        let chunks = chunk_text(&doc, 1200, 200);
        assert!(chunks.len() >= 2);
        let rebuilt: String = {
            let mut s = chunks[0].text.clone();
            for c in &chunks[1..] {
                s.extend(c.text.chars().skip(200));
            }
            s
        };
        assert_eq!(rebuilt, doc);
    }

    #[test]
    fn empty_document_has_no_chunks() {
        assert!(chunk_text("", 1200, 200).is_empty());
    }
}
