/**
 * Browser entry: three.js rendering of the streamed surface, drag tugging,
 * character swapping, pause/resume. Pure logic lives in the sibling modules;
 * this file is the DOM/WebGL glue.
 */

import * as THREE from "three";

import { loadCatalog } from "./catalog.js";
import { Connection, makeWebSocketFactory } from "./connection.js";
import type { MeshTopology } from "./protocol.js";
import { ViewerState } from "./state.js";
import { DragSession, defaultGain, Ray, Vec3 } from "./tug.js";

const PICK_THRESHOLD = 0.08;

export function startViewer(root: HTMLElement, serverUrl: string, catalogUrl?: string): void {
  const width = root.clientWidth || 960;
  const height = root.clientHeight || 640;

  const renderer = new THREE.WebGLRenderer({ antialias: true });
  renderer.setSize(width, height);
  root.appendChild(renderer.domElement);

  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x10141a);
  const camera = new THREE.PerspectiveCamera(45, width / height, 0.01, 100);
  camera.position.set(1.6, 1.1, 1.6);
  camera.lookAt(0, 0, 0);
  scene.add(new THREE.AmbientLight(0xffffff, 0.45));
  const key = new THREE.DirectionalLight(0xffffff, 0.9);
  key.position.set(2, 3, 1.5);
  scene.add(key);

  const banner = document.createElement("div");
  banner.className = "banner";
  root.appendChild(banner);

  const controls = document.createElement("div");
  controls.className = "controls";
  root.appendChild(controls);

  const gainSlider = document.createElement("input");
  gainSlider.type = "range";
  gainSlider.min = "0.1";
  gainSlider.max = "10";
  gainSlider.step = "0.1";
  gainSlider.value = "1";
  const gainLabel = document.createElement("label");
  gainLabel.textContent = "force gain ";
  gainLabel.appendChild(gainSlider);
  controls.appendChild(gainLabel);

  const pauseButton = document.createElement("button");
  pauseButton.textContent = "pause";
  controls.appendChild(pauseButton);

  const state = new ViewerState();
  let mesh: THREE.Mesh | null = null;
  let geometry: THREE.BufferGeometry | null = null;
  let paused = false;

  function rebindTopology(topology: MeshTopology): void {
    state.applyTopology(topology);
    if (mesh) {
      scene.remove(mesh);
      geometry?.dispose();
    }
    geometry = new THREE.BufferGeometry();
    geometry.setAttribute(
      "position",
      new THREE.BufferAttribute(new Float32Array(3 * topology.vertex_count), 3),
    );
    geometry.setIndex(topology.faces.flat());
    const material = new THREE.MeshStandardMaterial({
      color: 0x4f9cf0,
      flatShading: true,
    });
    mesh = new THREE.Mesh(geometry, material);
    scene.add(mesh);
  }

  const connection = new Connection(makeWebSocketFactory(serverUrl), {
    onStatus: (status) => {
      state.status = status;
      banner.textContent = status === "connected" ? "" : status;
    },
    onTopology: rebindTopology,
    onFrame: (header, positions) => {
      const frame = state.applyFrame(header, positions);
      if (frame && geometry) {
        const attr = geometry.getAttribute("position") as THREE.BufferAttribute;
        (attr.array as Float32Array).set(frame.positions);
        attr.needsUpdate = true;
        geometry.computeVertexNormals();
      }
    },
    onError: (text) => {
      banner.textContent = text;
    },
  });
  connection.open();

  if (catalogUrl) {
    loadCatalog(catalogUrl)
      .then((entries) => {
        for (const entry of entries) {
          const button = document.createElement("button");
          button.textContent = entry.name;
          button.onclick = () => connection.send({ type: "swap_mesh", id: entry.id });
          controls.appendChild(button);
        }
      })
      .catch((err) => {
        banner.textContent = String(err);
      });
  }

  pauseButton.onclick = () => {
    paused = !paused;
    pauseButton.textContent = paused ? "resume" : "pause";
    connection.send({ type: paused ? "pause" : "resume" });
  };

  function cursorRay(event: MouseEvent): Ray {
    const rect = renderer.domElement.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((event.clientX - rect.left) / rect.width) * 2 - 1,
      -((event.clientY - rect.top) / rect.height) * 2 + 1,
    );
    const caster = new THREE.Raycaster();
    caster.setFromCamera(ndc, camera);
    return {
      origin: caster.ray.origin.toArray() as Vec3,
      direction: caster.ray.direction.toArray() as Vec3,
    };
  }

  function cameraBasis() {
    const right = new THREE.Vector3();
    const up = new THREE.Vector3();
    camera.matrixWorld.extractBasis(right, up, new THREE.Vector3());
    return { right: right.toArray() as Vec3, up: up.toArray() as Vec3 };
  }

  let drag: DragSession | null = null;

  renderer.domElement.addEventListener("mousedown", (event) => {
    const positions = state.latestFrame?.positions ?? null;
    drag = new DragSession(
      cameraBasis(),
      Number(gainSlider.value) * defaultGain(50.0, rect().width),
    );
    drag.down(positions, cursorRay(event), PICK_THRESHOLD, event.clientX, event.clientY);
  });
  renderer.domElement.addEventListener("mousemove", (event) => {
    if (!drag) return;
    for (const msg of drag.move(event.clientX, event.clientY)) connection.send(msg);
  });
  window.addEventListener("mouseup", () => {
    if (!drag) return;
    for (const msg of drag.up()) connection.send(msg);
    drag = null;
  });

  function rect(): DOMRect {
    return renderer.domElement.getBoundingClientRect();
  }

  function animate(): void {
    requestAnimationFrame(animate);
    renderer.render(scene, camera);
  }
  animate();
}
