//! Byte-exact codecs: the data protocol, the monitoring datagram and the
//! shoveler → collector framing.

mod frame;
mod message;
mod record;

pub use frame::{decode_frame, encode_frame, frame_read, frame_write, FrameError, ACK, MAX_FRAME};
pub use message::{
    Headers, Method, ProtocolError, ProtocolErrorKind, Request, Response, StatusCode, WireError,
    MAX_HEAD, VERSION,
};
pub use record::{decode_monitor_record, encode_monitor_record, CodecError, MAX_DATAGRAM};
