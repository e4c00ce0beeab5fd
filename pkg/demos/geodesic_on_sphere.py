"""
Geodesics on the unit sphere
============================

Christoffel symbols from finite differences of the metric, then a great
circle traced with RK4 in (theta, phi) coordinates.
"""
import math

import numpy as np

from gate.geometry import christoffel, geodesic_integrate, sphere, sphere_to_cartesian

g = sphere()
gam = christoffel(g, [math.pi / 4, 0.0])
print("Gamma^theta_phiphi at theta=pi/4:", gam[0, 1, 1])   # -sin cos = -0.5
print("Gamma^phi_thetaphi at theta=pi/4:", gam[1, 0, 1])   # cot = 1.0

# start on the equator and head north-east
a = 0.6
path = geodesic_integrate(g, [math.pi / 2, 0.0], [-math.sin(a), math.cos(a)], (0.0, math.pi), 1000)
xyz = np.array([sphere_to_cartesian(x) for x in path.x])

# a great circle lies in a plane through the origin
normal = np.cross(xyz[0], xyz[100])
normal /= np.linalg.norm(normal)
print("max distance from the great-circle plane:", np.abs(xyz @ normal).max())
print("max radius error:", np.abs(np.linalg.norm(xyz, axis=1) - 1).max())
speeds = path.speeds(g)
print("speed drift:", np.abs(speeds - speeds[0]).max())
