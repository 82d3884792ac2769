/** Single-device flow: read a.safetensors and show tensor a0. */

import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { SafeTensorsFileLoader, SingleGroup, writeFile } from "../src/index.js";

function makeFixture(dir: string): string {
  const values = new Float32Array([0, 1, 2, 3, 4, 5]);
  const blob = writeFile({
    a0: { dtype: "F32", shape: [2, 3], data: new Uint8Array(values.buffer) },
  });
  const file = path.join(dir, "a.safetensors");
  fs.writeFileSync(file, blob);
  return file;
}

async function main(): Promise<void> {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "aggload-single-"));
  const file = makeFixture(dir);

  const loader = new SafeTensorsFileLoader(SingleGroup(), "host");
  loader.add_filenames({ 0: [file] });
  const fb = await loader.copy_files_to_device();
  const tensor_a0 = await fb.get_tensor("a0");
  console.log(`a0: ${tensor_a0}`);
  fb.close();
  loader.close();
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
