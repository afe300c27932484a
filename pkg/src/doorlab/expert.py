"""Scripted demonstrator standing in for teleoperation.

The expert reads the true world state; learners only ever see rendered images.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import doorworld as dw
from .errors import ProtocolError


class ExpertPhase(enum.IntEnum):
    APPROACH = 0
    REACH = 1
    TURN = 2
    PUSH = 3
    ENTER = 4
    TERMINATE = 5


# margins past the environment thresholds so rollouts end decisively
ENTER_MARGIN = 0.12
APPROACH_TOL = 0.02
YAW_TOL = math.radians(3.0)
TUCK_TOL = math.radians(4.0)
RECOVERY_FRACTION = 0.3  # share of demonstrations that start from a fumbled turn
APPROACH_SPEED = 0.2  # cautious speed limit while the door is still latched
REACH_START = 0.2     # distance to the parking spot at which the arm starts reaching


@dataclass(frozen=True)
class ActionNoise:
    """Zero-mean Gaussian perturbation of executed demonstrator actions.

    Demonstrations then visit slightly off-nominal states and show the
    corrections back, which a cloned policy needs once its own errors pile up.
    The executed (perturbed) action is what gets recorded.
    """
    base_speed: float = 0.05
    yaw_rate: float = math.radians(5.0)
    joint: float = math.radians(1.5)

    def sample(self, rng: np.random.Generator, arm_dof: int):
        return (rng.normal(0.0, [self.base_speed, self.yaw_rate]),
                rng.normal(0.0, self.joint, arm_dof))


DEFAULT_NOISE = ActionNoise()
NO_NOISE = ActionNoise(0.0, 0.0, 0.0)


def _reach_target(state: dw.WorldState, scene: dw.SceneSpec, config: dw.WorldConfig):
    """Base x and arm angles that put the end effector on the handle.

    The arm reaches on a sphere around the shoulder, so elevation fixes the
    horizontal radius and the required standoff from the door.
    """
    h = dw.handle_position(scene, config)
    sin_q1 = np.clip((h[2] - config.shoulder_height) / config.arm_reach, -0.95, 0.95)
    q1 = math.asin(sin_q1)
    rho = config.arm_reach * math.cos(q1)
    r = state.robot
    # lateral offset of the handle in the base frame
    c, s = math.cos(r.base_yaw), math.sin(r.base_yaw)
    dxw, dyw = h[0] - r.base_x, h[1] - r.base_y
    lat = -s * dxw + c * dyw
    q0 = math.asin(np.clip(lat / rho, -0.99, 0.99))
    fwd = config.shoulder_forward + rho * math.cos(q0)
    target_x = h[0] - fwd
    return target_x, q0, q1


def phase_of(state: dw.WorldState, scene: dw.SceneSpec,
             config: dw.WorldConfig = dw.WorldConfig()) -> ExpertPhase:
    door = state.door
    if not door.latched:
        if (door.open_angle >= config.open_threshold
                and state.robot.base_x >= config.doorway_cross_x + ENTER_MARGIN):
            return ExpertPhase.TERMINATE
        if door.open_angle >= config.open_threshold:
            return ExpertPhase.ENTER
        return ExpertPhase.PUSH
    ee = dw.ee_position(state.robot, config)
    if np.linalg.norm(ee - dw.handle_position(scene, config)) <= 0.6 * config.grasp_radius:
        return ExpertPhase.TURN
    target_x, _, _ = _reach_target(state, scene, config)
    if (abs(state.robot.base_x - target_x) <= APPROACH_TOL
            and abs(state.robot.base_yaw) <= YAW_TOL):
        return ExpertPhase.REACH
    return ExpertPhase.APPROACH


def _arm_toward(current, target, config):
    return np.clip(np.asarray(target) - np.asarray(current),
                   -config.max_joint_delta, config.max_joint_delta)


def expert_action(state: dw.WorldState, scene: dw.SceneSpec,
                  config: dw.WorldConfig = dw.WorldConfig()) -> dw.Action:
    """Proportional controller toward the current phase's subgoal."""
    phase = phase_of(state, scene, config)
    r = state.robot
    q = np.asarray(r.arm_joints)
    base = np.zeros(2)
    arm = np.zeros(config.arm_dof)
    if phase == ExpertPhase.TERMINATE:
        return dw.Action(base, arm, terminate=True)

    target_x, q0, q1 = _reach_target(state, scene, config)
    err = target_x - r.base_x
    # base speed is proportional to the remaining distance in every pre-unlatch
    # phase, so the command varies smoothly with what the camera sees
    v = float(np.clip(1.0 * err, -APPROACH_SPEED, APPROACH_SPEED))
    if phase == ExpertPhase.APPROACH:
        # steer gently back toward the doorway centre line while far out
        want_yaw = np.clip(-2.0 * r.base_y, -0.25, 0.25) if abs(err) > 0.1 else 0.0
        base[:] = v, np.clip(4.0 * (want_yaw - r.base_yaw), -config.max_yaw_rate, config.max_yaw_rate)
        if abs(err) > REACH_START:
            arm[:] = _arm_toward(q, dw.initial_arm(scene.swing, config.arm_dof), config)
        else:
            arm[:2] = _arm_toward(q[:2], [q0, q1], config)
    elif phase in (ExpertPhase.REACH, ExpertPhase.TURN):
        base[:] = v, np.clip(4.0 * -r.base_yaw, -config.max_yaw_rate, config.max_yaw_rate)
        arm[:2] = _arm_toward(q[:2], [q0, q1], config)
        if phase == ExpertPhase.TURN:
            arm[2] = scene.turn_sign * config.max_joint_delta
    else:
        # PUSH / ENTER: tuck the arm first, then drive through the doorway centre
        rest = np.array([0.0, -1.0, 0.0] + [0.0] * (config.arm_dof - 3))
        arm[:] = _arm_toward(q, rest, config)
        if state.door.open_angle <= config.ajar_angle and np.max(np.abs(q - rest)) > TUCK_TOL:
            return dw.Action(base, arm, terminate=False)
        want_yaw = float(np.clip(-2.5 * r.base_y, -0.35, 0.35))
        base[0] = 0.4
        base[1] = np.clip(4.0 * (want_yaw - r.base_yaw), -config.max_yaw_rate, config.max_yaw_rate)
    return dw.Action(base, arm, terminate=False)


@dataclass
class ExpertRollout:
    states: list
    actions: list
    success: bool


def run_expert(scene: dw.SceneSpec, seed: int, config: dw.WorldConfig = dw.WorldConfig(),
               noise: ActionNoise = DEFAULT_NOISE) -> ExpertRollout:
    """Roll the expert from ``reset(scene, seed)`` until it terminates or fails.

    Executed actions carry ``noise`` drawn from a stream seeded by ``seed``,
    so an episode is reproducible from its seed alone.
    """
    return _rollout(dw.reset(scene, seed, config), scene, np.random.default_rng([seed, 1]),
                    config, noise)


def _rollout(state, scene, rng, config, noise) -> ExpertRollout:
    states, actions = [], []
    while True:
        act = expert_action(state, scene, config)
        if not act.terminate:
            db, da = noise.sample(rng, config.arm_dof)
            bs = np.array([config.max_base_speed, config.max_yaw_rate])
            act = dw.Action(np.clip(act.base + db, -bs, bs),
                            np.clip(act.arm + da, -config.max_joint_delta, config.max_joint_delta), False)
        states.append(state)
        actions.append(act)
        if act.terminate:
            return ExpertRollout(states, actions, dw.is_success(state, scene, config))
        state = dw.step(state, act, scene, config)
        if dw.is_terminal(state, config):
            return ExpertRollout(states, actions, False)


def run_recovery(scene: dw.SceneSpec, seed: int, config: dw.WorldConfig = dw.WorldConfig(),
                 noise: ActionNoise = DEFAULT_NOISE) -> ExpertRollout:
    """A demonstration that starts from a fumbled handle turn.

    The nominal episode is run up to a random point of the turn. There the arm
    is knocked part of the way back to rest and the base nudged toward the
    still-latched door, and the recording starts. What follows shows the
    expert backing off, reaching again and finishing the turn: states a cloned
    policy lands in after letting go early, which nominal episodes never visit.
    """
    rng = np.random.default_rng([seed, 2])
    nominal = run_expert(scene, seed, config, noise)
    cut = math.radians(rng.uniform(10.0, 42.0))
    turning = [s for s in nominal.states
               if s.door.latched and s.door.handle_angle >= cut]
    if not turning:
        return nominal
    st = turning[0]
    q = np.asarray(st.robot.arm_joints)
    rest = np.array([0.0, -1.0, 0.0] + [0.0] * (config.arm_dof - 3))
    q = q + rng.uniform(0.4, 1.0) * (rest - q)
    robot = dw.RobotState(st.robot.base_x + rng.uniform(0.0, 0.15), st.robot.base_y,
                          st.robot.base_yaw, tuple(float(a) for a in q))
    start = dw.WorldState(robot, st.door, st.step, noise_seed=st.noise_seed)
    return _rollout(start, scene, rng, config, noise)


def collect(scenes, episodes_per_scene: int, domain: str, seed: int,
            config: dw.WorldConfig = dw.WorldConfig(), render_config=None,
            max_attempts: int = 20, progress=None, recovery_fraction: float = RECOVERY_FRACTION):
    """Successful demonstrations for every scene, discarding expert failures.

    About ``recovery_fraction`` of them are recovery episodes (see ``run_recovery``).

    Episode seeds are drawn from one seeded stream per (scene, episode index),
    so the result does not depend on how many attempts other episodes needed.
    """
    from .datastore import Episode, build_episode

    if domain not in ("sim", "real"):
        raise ProtocolError(f"unknown domain {domain!r}")
    for sc in scenes:
        if sc.split != "train":
            raise ProtocolError(f"demonstrations are only collected on train scenes; got {sc.scene_id}")
    episodes: list[Episode] = []
    for si, sc in enumerate(scenes):
        sc_a = sc.under_variant("A")
        for k in range(episodes_per_scene):
            stream = np.random.default_rng([seed, si, k])
            run = run_recovery if stream.random() < recovery_fraction else run_expert
            for _ in range(max_attempts):
                ep_seed = int(stream.integers(0, 2**31 - 1))
                roll = run(sc_a, ep_seed, config)
                if roll.success:
                    episodes.append(build_episode(roll, sc_a, domain, ep_seed, config, render_config))
                    break
            else:
                raise RuntimeError(f"expert failed {max_attempts} times on {sc.scene_id}")
        if progress is not None:
            print(f"[collect] {domain} {sc.scene_id}: {episodes_per_scene} episodes", file=progress)
    return episodes
