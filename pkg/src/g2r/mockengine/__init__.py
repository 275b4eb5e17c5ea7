from g2r.mockengine.render import (
    LidarConfig,
    LidarScan,
    SensorFrame,
    cast_rays,
    lidar_scan,
    pixel_directions,
    render_sensors,
)
from g2r.mockengine.service import EngineService
from g2r.mockengine.world import (
    FAST_CAMERA,
    PRESET_NAMES,
    Actor,
    ActorKind,
    CameraModel,
    Controls,
    UnknownPreset,
    WeatherPreset,
    World,
    apply_weather,
    make_ego,
    random_world,
    status_records,
    tick,
    weather_preset,
)
