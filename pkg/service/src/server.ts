/**
 * Protocol server: answers hello with version 1, then request/gradient pairs
 * until EOF. Per-request failures produce type-3 errors and keep the
 * connection open; malformed framing closes it after a type-3 error.
 */

import * as net from 'node:net';
import {
  encodeMessage, GuidanceGradient, Message, PROTOCOL_VERSION, ProtocolError,
  StreamDecoder,
} from './protocol.js';
import { ScoreBackbone } from './backbone.js';
import { sdsGradient, SdsOptions, WeightMode } from './sds.js';

export interface ServiceConfig {
  backbone: ScoreBackbone;
  deterministic: boolean;
  weightMode: WeightMode;
}

export class RequestHandler {
  private nonce = 0n;

  constructor(readonly config: ServiceConfig) {}

  handle(msg: Message): Buffer {
    if (msg.kind === 'hello') {
      return encodeMessage({ kind: 'hello', version: PROTOCOL_VERSION, flags: 0 });
    }
    if (msg.kind === 'request') {
      try {
        const opts: SdsOptions = {
          deterministic: this.config.deterministic,
          weightMode: this.config.weightMode,
          nonce: this.nonce++,
        };
        const gradients = sdsGradient(msg, this.config.backbone, opts);
        const reply: GuidanceGradient = {
          kind: 'gradient', requestId: msg.requestId, status: 0,
          gradients, b: msg.b, h: msg.h, w: msg.w,
        };
        return encodeMessage(reply);
      } catch (err) {
        return encodeMessage({
          kind: 'error', requestId: msg.requestId, code: 2,
          message: err instanceof Error ? err.message : String(err),
        });
      }
    }
    return encodeMessage({
      kind: 'error', requestId: 0n, code: 3, message: `unexpected ${msg.kind}`,
    });
  }
}

export function serveTcp(config: ServiceConfig, host: string, port: number): Promise<net.Server> {
  const server = net.createServer((socket) => {
    const decoder = new StreamDecoder();
    const handler = new RequestHandler(config);
    socket.on('data', (data) => {
      let messages: Message[];
      try {
        messages = decoder.feed(data);
      } catch (err) {
        const text = err instanceof ProtocolError ? err.message : String(err);
        socket.write(encodeMessage({ kind: 'error', requestId: 0n, code: 1, message: text }));
        socket.end();
        return;
      }
      for (const msg of messages) socket.write(handler.handle(msg));
    });
    socket.on('error', () => socket.destroy());
  });
  return new Promise((resolve, reject) => {
    server.once('error', reject);
    server.listen(port, host, () => resolve(server));
  });
}

export function serveStdio(config: ServiceConfig,
                           input: NodeJS.ReadableStream = process.stdin,
                           output: NodeJS.WritableStream = process.stdout): Promise<void> {
  const decoder = new StreamDecoder();
  const handler = new RequestHandler(config);
  return new Promise((resolve) => {
    input.on('data', (data: Buffer) => {
      let messages: Message[];
      try {
        messages = decoder.feed(data);
      } catch (err) {
        const text = err instanceof ProtocolError ? err.message : String(err);
        output.write(encodeMessage({ kind: 'error', requestId: 0n, code: 1, message: text }));
        resolve();
        return;
      }
      for (const msg of messages) output.write(handler.handle(msg));
    });
    input.on('end', () => resolve());
  });
}
