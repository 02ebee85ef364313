/**
 * Spherical orbit camera around the scene center.
 *
 * Produces the same world-to-camera convention the server expects: camera
 * x right, y down, z forward; pose sent as a wxyz quaternion plus
 * translation t = -R * position.
 */

import type { ViewPose } from "./protocol.js";

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number];

export interface OrbitState {
  target: Vec3;
  radius: number;
  azimuth: number; // radians around the y axis
  elevation: number; // radians above the horizontal plane
  minRadius: number;
  maxRadius: number;
}

const ELEVATION_LIMIT = Math.PI / 2 - 0.01;

export function createOrbit(
  opts: Partial<OrbitState> & { near?: number } = {},
): OrbitState {
  const near = opts.near ?? 0.01;
  return {
    target: opts.target ?? [0, 0, 0],
    radius: opts.radius ?? 2.6,
    azimuth: opts.azimuth ?? 0,
    elevation: opts.elevation ?? 0.15,
    // zoom stops at the near plane: the target never crosses it
    minRadius: opts.minRadius ?? near,
    maxRadius: opts.maxRadius ?? 100,
  };
}

export function rotate(state: OrbitState, dAzimuth: number, dElevation: number): OrbitState {
  return {
    ...state,
    azimuth: state.azimuth + dAzimuth,
    elevation: Math.max(-ELEVATION_LIMIT, Math.min(ELEVATION_LIMIT, state.elevation + dElevation)),
  };
}

export function zoom(state: OrbitState, factor: number): OrbitState {
  const radius = Math.max(state.minRadius, Math.min(state.maxRadius, state.radius * factor));
  return { ...state, radius };
}

export function cameraPosition(state: OrbitState): Vec3 {
  const c = Math.cos(state.elevation);
  return [
    state.target[0] + state.radius * c * Math.cos(state.azimuth),
    state.target[1] + state.radius * Math.sin(state.elevation),
    state.target[2] + state.radius * c * Math.sin(state.azimuth),
  ];
}

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n < 1e-12) throw new Error("degenerate direction");
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** Rows of the world-to-camera rotation for a camera looking at `target`. */
export function lookAtRows(position: Vec3, target: Vec3, up: Vec3 = [0, 1, 0]): [Vec3, Vec3, Vec3] {
  const z = normalize(sub(target, position));
  let x: Vec3;
  try {
    x = normalize(cross(z, up));
  } catch {
    const alt: Vec3 = Math.abs(z[0]) < 0.9 ? [1, 0, 0] : [0, 1, 0];
    x = normalize(cross(z, alt));
  }
  const y = cross(z, x);
  return [x, y, z];
}

/** wxyz quaternion of a rotation matrix given as rows. */
export function rowsToQuat(m: [Vec3, Vec3, Vec3]): Quat {
  const t = m[0][0] + m[1][1] + m[2][2];
  let q: Quat;
  if (t > 0) {
    const s = Math.sqrt(t + 1) * 2;
    q = [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s];
  } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
    const s = Math.sqrt(1 + m[0][0] - m[1][1] - m[2][2]) * 2;
    q = [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s];
  } else if (m[1][1] > m[2][2]) {
    const s = Math.sqrt(1 + m[1][1] - m[0][0] - m[2][2]) * 2;
    q = [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s];
  } else {
    const s = Math.sqrt(1 + m[2][2] - m[0][0] - m[1][1]) * 2;
    q = [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s];
  }
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
  return q[0] < 0 ? ([-q[0], -q[1], -q[2], -q[3]] as Quat) : q;
}

export interface Intrinsics {
  fx: number;
  fy: number;
  width: number;
  height: number;
}

/** Full set_view payload for the current orbit state. */
export function orbitPose(state: OrbitState, intr: Intrinsics): ViewPose {
  const position = cameraPosition(state);
  const rows = lookAtRows(position, state.target);
  const q = rowsToQuat(rows);
  const t: Vec3 = [
    -(rows[0][0] * position[0] + rows[0][1] * position[1] + rows[0][2] * position[2]),
    -(rows[1][0] * position[0] + rows[1][1] * position[1] + rows[1][2] * position[2]),
    -(rows[2][0] * position[0] + rows[2][1] * position[1] + rows[2][2] * position[2]),
  ];
  return {
    rotation_wxyz: q,
    translation: t,
    fx: intr.fx,
    fy: intr.fy,
    width: intr.width,
    height: intr.height,
  };
}

export function poseDistance(a: ViewPose, b: ViewPose): number {
  let d = 0;
  for (let i = 0; i < 4; i++) d = Math.max(d, Math.abs(a.rotation_wxyz[i] - b.rotation_wxyz[i]));
  for (let i = 0; i < 3; i++) d = Math.max(d, Math.abs(a.translation[i] - b.translation[i]));
  return d;
}
