/**
 * Wire protocol codec.
 *
 * Frame: magic "TGDP" | u32 version | u32 msg_type | u64 payload_len | payload
 * (all integers little-endian). Message types: 1 request, 2 gradient,
 * 3 error, 4 hello. See the README for payload layouts; extension blocks are
 * TLV (u32 type | u64 length | bytes) after the request image data.
 */

export const MAGIC = Buffer.from('TGDP', 'ascii');
export const PROTOCOL_VERSION = 1;

export const MSG_REQUEST = 1;
export const MSG_GRADIENT = 2;
export const MSG_ERROR = 3;
export const MSG_HELLO = 4;

export const EXT_CAMERAS = 1;

const HEADER_SIZE = 4 + 4 + 4 + 8;

export class ProtocolError extends Error {}

export interface Hello {
  kind: 'hello';
  version: number;
  flags: number;
}

export interface GuidanceRequest {
  kind: 'request';
  requestId: bigint;
  prompt: string;
  /** shape [b, h, w, 3], row-major float32 */
  images: Float32Array;
  b: number;
  h: number;
  w: number;
  tMin: number;
  tMax: number;
  seed: bigint;
  guidanceScale: number;
  extensions: Array<{ type: number; data: Buffer }>;
}

export interface GuidanceGradient {
  kind: 'gradient';
  requestId: bigint;
  status: number;
  gradients: Float32Array;
  b: number;
  h: number;
  w: number;
}

export interface ErrorMessage {
  kind: 'error';
  requestId: bigint;
  code: number;
  message: string;
}

export type Message = Hello | GuidanceRequest | GuidanceGradient | ErrorMessage;

function frame(msgType: number, payload: Buffer): Buffer {
  const head = Buffer.alloc(HEADER_SIZE);
  MAGIC.copy(head, 0);
  head.writeUInt32LE(PROTOCOL_VERSION, 4);
  head.writeUInt32LE(msgType, 8);
  head.writeBigUInt64LE(BigInt(payload.length), 12);
  return Buffer.concat([head, payload]);
}

export function encodeMessage(msg: Message): Buffer {
  switch (msg.kind) {
    case 'hello': {
      const p = Buffer.alloc(8);
      p.writeUInt32LE(msg.version, 0);
      p.writeUInt32LE(msg.flags, 4);
      return frame(MSG_HELLO, p);
    }
    case 'error': {
      const text = Buffer.from(msg.message, 'utf8');
      const p = Buffer.alloc(16 + text.length);
      p.writeBigUInt64LE(msg.requestId, 0);
      p.writeUInt32LE(msg.code, 8);
      p.writeUInt32LE(text.length, 12);
      text.copy(p, 16);
      return frame(MSG_ERROR, p);
    }
    case 'gradient': {
      const count = msg.b * msg.h * msg.w * 3;
      if (msg.gradients.length !== count) {
        throw new ProtocolError(`gradient buffer ${msg.gradients.length} != ${count}`);
      }
      const p = Buffer.alloc(24 + count * 4);
      p.writeBigUInt64LE(msg.requestId, 0);
      p.writeUInt32LE(msg.status, 8);
      p.writeUInt32LE(msg.b, 12);
      p.writeUInt32LE(msg.h, 16);
      p.writeUInt32LE(msg.w, 20);
      Buffer.from(msg.gradients.buffer, msg.gradients.byteOffset, count * 4).copy(p, 24);
      return frame(MSG_GRADIENT, p);
    }
    case 'request': {
      const prompt = Buffer.from(msg.prompt, 'utf8');
      const count = msg.b * msg.h * msg.w * 3;
      if (msg.images.length !== count) {
        throw new ProtocolError(`image buffer ${msg.images.length} != ${count}`);
      }
      for (const v of msg.images) {
        if (!Number.isFinite(v)) throw new ProtocolError('non-finite image values');
      }
      let extSize = 0;
      for (const e of msg.extensions) extSize += 12 + e.data.length;
      const p = Buffer.alloc(12 + prompt.length + 20 + 12 + count * 4 + extSize);
      let off = 0;
      p.writeBigUInt64LE(msg.requestId, off); off += 8;
      p.writeUInt32LE(prompt.length, off); off += 4;
      prompt.copy(p, off); off += prompt.length;
      p.writeUInt32LE(msg.b, off); off += 4;
      p.writeUInt32LE(msg.h, off); off += 4;
      p.writeUInt32LE(msg.w, off); off += 4;
      p.writeUInt32LE(msg.tMin, off); off += 4;
      p.writeUInt32LE(msg.tMax, off); off += 4;
      p.writeBigUInt64LE(msg.seed, off); off += 8;
      p.writeFloatLE(msg.guidanceScale, off); off += 4;
      Buffer.from(msg.images.buffer, msg.images.byteOffset, count * 4).copy(p, off);
      off += count * 4;
      for (const e of msg.extensions) {
        p.writeUInt32LE(e.type, off); off += 4;
        p.writeBigUInt64LE(BigInt(e.data.length), off); off += 8;
        e.data.copy(p, off); off += e.data.length;
      }
      return frame(MSG_REQUEST, p);
    }
  }
}

function decodePayload(msgType: number, payload: Buffer): Message {
  if (msgType === MSG_HELLO) {
    if (payload.length !== 8) throw new ProtocolError('bad hello payload size');
    return { kind: 'hello', version: payload.readUInt32LE(0), flags: payload.readUInt32LE(4) };
  }
  if (msgType === MSG_ERROR) {
    const requestId = payload.readBigUInt64LE(0);
    const code = payload.readUInt32LE(8);
    const n = payload.readUInt32LE(12);
    return { kind: 'error', requestId, code, message: payload.subarray(16, 16 + n).toString('utf8') };
  }
  if (msgType === MSG_GRADIENT) {
    const requestId = payload.readBigUInt64LE(0);
    const status = payload.readUInt32LE(8);
    const b = payload.readUInt32LE(12);
    const h = payload.readUInt32LE(16);
    const w = payload.readUInt32LE(20);
    const count = b * h * w * 3;
    if (payload.length !== 24 + count * 4) {
      throw new ProtocolError(`gradient payload size mismatch (${payload.length})`);
    }
    const gradients = new Float32Array(count);
    for (let i = 0; i < count; i++) gradients[i] = payload.readFloatLE(24 + i * 4);
    return { kind: 'gradient', requestId, status, gradients, b, h, w };
  }
  if (msgType === MSG_REQUEST) {
    let off = 0;
    const requestId = payload.readBigUInt64LE(off); off += 8;
    const plen = payload.readUInt32LE(off); off += 4;
    const prompt = payload.subarray(off, off + plen).toString('utf8'); off += plen;
    const b = payload.readUInt32LE(off); off += 4;
    const h = payload.readUInt32LE(off); off += 4;
    const w = payload.readUInt32LE(off); off += 4;
    const tMin = payload.readUInt32LE(off); off += 4;
    const tMax = payload.readUInt32LE(off); off += 4;
    const seed = payload.readBigUInt64LE(off); off += 8;
    const guidanceScale = payload.readFloatLE(off); off += 4;
    const count = b * h * w * 3;
    if (payload.length < off + count * 4) throw new ProtocolError('request payload truncated');
    const images = new Float32Array(count);
    for (let i = 0; i < count; i++) images[i] = payload.readFloatLE(off + i * 4);
    off += count * 4;
    const extensions: Array<{ type: number; data: Buffer }> = [];
    while (off < payload.length) {
      if (off + 12 > payload.length) throw new ProtocolError('truncated extension header');
      const type = payload.readUInt32LE(off); off += 4;
      const len = Number(payload.readBigUInt64LE(off)); off += 8;
      if (off + len > payload.length) throw new ProtocolError('truncated extension body');
      extensions.push({ type, data: Buffer.from(payload.subarray(off, off + len)) });
      off += len;
    }
    return {
      kind: 'request', requestId, prompt, images, b, h, w, tMin, tMax, seed,
      guidanceScale, extensions,
    };
  }
  throw new ProtocolError(`unknown message type ${msgType}`);
}

/** Incremental frame decoder; tolerates arbitrary fragmentation. */
export class StreamDecoder {
  private buf = Buffer.alloc(0);

  feed(data: Buffer): Message[] {
    this.buf = this.buf.length ? Buffer.concat([this.buf, data]) : Buffer.from(data);
    const out: Message[] = [];
    for (;;) {
      if (this.buf.length < HEADER_SIZE) break;
      if (!this.buf.subarray(0, 4).equals(MAGIC)) {
        throw new ProtocolError(`bad magic ${this.buf.subarray(0, 4).toString('hex')}`);
      }
      const version = this.buf.readUInt32LE(4);
      if (version !== PROTOCOL_VERSION) {
        throw new ProtocolError(
          `protocol version mismatch: peer speaks ${version}, this build speaks ${PROTOCOL_VERSION}`);
      }
      const msgType = this.buf.readUInt32LE(8);
      const length = Number(this.buf.readBigUInt64LE(12));
      if (this.buf.length < HEADER_SIZE + length) break;
      const payload = this.buf.subarray(HEADER_SIZE, HEADER_SIZE + length);
      out.push(decodePayload(msgType, Buffer.from(payload)));
      this.buf = Buffer.from(this.buf.subarray(HEADER_SIZE + length));
    }
    return out;
  }
}

export function decodeMessage(data: Buffer): Message {
  const msgs = new StreamDecoder().feed(data);
  if (msgs.length !== 1) throw new ProtocolError(`expected one message, got ${msgs.length}`);
  return msgs[0];
}
