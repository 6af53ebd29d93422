/** CLI: serve --endpoint host:port | --stdio, --backbone, --deterministic. */

import { loadBackbone, StartupError } from './backbone.js';
import { serveStdio, serveTcp, ServiceConfig } from './server.js';
import { WeightMode } from './sds.js';

function parseArgs(argv: string[]) {
  const args = {
    command: argv[0] ?? '',
    host: '127.0.0.1',
    port: 8731,
    backbone: 'gaussian',
    deterministic: false,
    stdio: false,
    weightMode: 'sigma2' as WeightMode,
    mock: false,
  };
  for (let i = 1; i < argv.length; i++) {
    const a = argv[i];
    if (a === '--host') args.host = argv[++i];
    else if (a === '--port') args.port = Number(argv[++i]);
    else if (a === '--backbone') args.backbone = argv[++i];
    else if (a === '--mock') args.mock = true;
    else if (a === '--deterministic') args.deterministic = true;
    else if (a === '--stdio') args.stdio = true;
    else if (a === '--weight-mode') args.weightMode = argv[++i] as WeightMode;
    else if (a === '--endpoint') {
      const [host, port] = argv[++i].split(':');
      args.host = host;
      args.port = Number(port);
    } else {
      throw new Error(`unknown argument ${a}`);
    }
  }
  return args;
}

export async function main(argv: string[]): Promise<number> {
  let args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(String(err));
    return 2;
  }
  if (args.command !== 'serve') {
    console.error('usage: main.js serve [--endpoint host:port | --stdio] ' +
      '[--backbone mock|gaussian|sd:<path>] [--mock] [--deterministic] ' +
      '[--weight-mode sigma2|uniform]');
    return 2;
  }
  let config: ServiceConfig;
  try {
    config = {
      backbone: loadBackbone(args.mock ? 'mock' : args.backbone),
      deterministic: args.deterministic,
      weightMode: args.weightMode,
    };
  } catch (err) {
    if (err instanceof StartupError) {
      console.error(`startup error: ${err.message}`);
      return 1;
    }
    throw err;
  }
  if (args.stdio) {
    await serveStdio(config);
    return 0;
  }
  const server = await serveTcp(config, args.host, args.port);
  const addr = server.address();
  const where = typeof addr === 'object' && addr ? `${addr.address}:${addr.port}` : String(addr);
  console.error(`serving ${config.backbone.name} backbone on ${where}` +
    (config.deterministic ? ' (deterministic)' : ''));
  await new Promise(() => undefined); // run until killed
  return 0;
}

const isMain = process.argv[1] && import.meta.url.endsWith(
  process.argv[1].split('/').pop() ?? '');
if (isMain) {
  main(process.argv.slice(2)).then((code) => {
    if (code !== 0) process.exit(code);
  });
}
