"""Length-prefixed frames carrying protocol messages over a byte stream.

Frame layout: magic ``DFL1`` | 1-byte tag | 4-byte big-endian payload length | payload.
"""

from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass
from typing import Union

from ..codec import DecodeError, Reader, Writer
from ..crypto import DIGEST_SIZE, PUBLIC_KEY_SIZE, address_of
from ..ledger import Block, Confirmation, Transaction
from ..protocol import ConfirmationMsg, DraftBlockMsg, Message, ReceiptedTransactionMsg, TransactionMsg

MAGIC = b"DFL1"
HEADER = struct.Struct(">4sBI")
MAX_PAYLOAD = 64 * 1024 * 1024

TAG_TRANSACTION = 0x01
TAG_RECEIPTED = 0x02
TAG_DRAFT = 0x03
TAG_CONFIRMATION = 0x04
TAG_HELLO = 0x05


class FrameError(ValueError):
    pass


class UnknownTag(FrameError):
    def __init__(self, tag: int) -> None:
        super().__init__(f"unknown message tag 0x{tag:02x}")
        self.tag = tag


@dataclass(frozen=True)
class Hello:
    """First frame on every connection."""

    address: bytes
    public_key: bytes
    genesis_digest: bytes
    listen_port: int = 0

    def valid(self) -> bool:
        return (len(self.public_key) == PUBLIC_KEY_SIZE and len(self.genesis_digest) == DIGEST_SIZE
                and address_of(self.public_key) == self.address)


Frame = Union[Message, Hello]


@dataclass(frozen=True)
class WireFrame:
    message_type: int
    payload: bytes

    @property
    def payload_length(self) -> int:
        return len(self.payload)

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, self.message_type, len(self.payload)) + self.payload


def _payload(msg: Frame) -> tuple[int, bytes]:
    w = Writer()
    if isinstance(msg, TransactionMsg):
        msg.transaction.encode(w)
        return TAG_TRANSACTION, w.getvalue()
    if isinstance(msg, ReceiptedTransactionMsg):
        msg.transaction.encode(w)
        return TAG_RECEIPTED, w.getvalue()
    if isinstance(msg, DraftBlockMsg):
        msg.block.encode(w)
        return TAG_DRAFT, w.getvalue()
    if isinstance(msg, ConfirmationMsg):
        msg.confirmation.encode(w)
        return TAG_CONFIRMATION, w.getvalue()
    if isinstance(msg, Hello):
        w.blob(msg.address).blob(msg.public_key).blob(msg.genesis_digest).u32(msg.listen_port)
        return TAG_HELLO, w.getvalue()
    raise TypeError(f"cannot frame {type(msg).__name__}")


def to_frame(msg: Frame) -> WireFrame:
    tag, payload = _payload(msg)
    return WireFrame(tag, payload)


def encode_message(msg: Frame) -> bytes:
    return to_frame(msg).to_bytes()


def parse_payload(tag: int, payload: bytes) -> Frame:
    r = Reader(payload)
    if tag == TAG_TRANSACTION:
        msg: Frame = TransactionMsg(Transaction.decode(r))
    elif tag == TAG_RECEIPTED:
        msg = ReceiptedTransactionMsg(Transaction.decode(r))
    elif tag == TAG_DRAFT:
        msg = DraftBlockMsg(Block.decode(r))
    elif tag == TAG_CONFIRMATION:
        msg = ConfirmationMsg(Confirmation.decode(r))
    elif tag == TAG_HELLO:
        msg = Hello(r.blob(), r.blob(), r.blob(), r.u32())
    else:
        raise UnknownTag(tag)
    r.expect_end()
    return msg


def parse_header(header: bytes) -> tuple[int, int]:
    magic, tag, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload of {length} bytes exceeds limit")
    return tag, length


def decode_frame(data: bytes) -> tuple[Frame, bytes]:
    """Parse one frame from the front of `data`; returns it and the unread rest."""
    if len(data) < HEADER.size:
        raise FrameError("truncated header")
    tag, length = parse_header(data[:HEADER.size])
    end = HEADER.size + length
    if len(data) < end:
        raise FrameError("truncated payload")
    try:
        return parse_payload(tag, data[HEADER.size:end]), data[end:]
    except DecodeError as exc:
        raise FrameError(f"malformed payload: {exc}") from exc


async def read_frame(reader: asyncio.StreamReader) -> WireFrame:
    """Raises asyncio.IncompleteReadError at a clean EOF."""
    header = await reader.readexactly(HEADER.size)
    tag, length = parse_header(header)
    return WireFrame(tag, await reader.readexactly(length))


def frame_message(frame: WireFrame) -> Frame:
    try:
        return parse_payload(frame.message_type, frame.payload)
    except DecodeError as exc:
        raise FrameError(f"malformed payload: {exc}") from exc
