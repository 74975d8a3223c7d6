//! What goes over a connection: a 4-byte big-endian length, then a JSON
//! envelope. Keys and values are base64.
//!
//!     cargo run --example wire_frames

use edgekv::wire::{self, ClientPut, Decoded, Envelope, MessageKind, RequestId, Scope};

fn main() -> edgekv::Result<()> {
    let env = Envelope::new(
        42,
        ClientPut { scope: Scope::Global, key: b"user/1001".to_vec(), value: b"hello".to_vec(), request_id: RequestId { client: 7, seq: 1 } },
    )
    .with_reply_to("127.0.0.1:7100");
    let frame = wire::encode(&env)?;
    println!("length prefix {:02x?} = {} bytes", &frame[..4], frame.len() - 4);
    println!("{}", std::str::from_utf8(&frame[4..]).unwrap());

    // Two frames back to back, arriving in pieces.
    let mut stream = frame.clone();
    stream.extend(wire::encode(&Envelope::new(43, wire::Ping { target: None }))?);
    let mut buf = Vec::new();
    for chunk in stream.chunks(17) {
        buf.extend_from_slice(chunk);
        while let Decoded::Frame { envelope, consumed } = wire::decode(&buf)? {
            println!("decoded {} id {} after {} buffered bytes", envelope.kind(), envelope.id, buf.len());
            buf.drain(..consumed);
        }
    }

    let kinds: Vec<&str> = MessageKind::ALL.iter().map(|k| k.as_str()).collect();
    println!("{} message kinds: {}", kinds.len(), kinds.join(", "));
    Ok(())
}
