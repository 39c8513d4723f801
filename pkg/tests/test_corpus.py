import wave

import numpy as np
import pytest

from asdbench.corpus import (
    AudioClip,
    ClipMeta,
    ClipPathError,
    ClippingWarning,
    DatasetIndex,
    DegenerateSignalError,
    DomainSpec,
    OutputTreeError,
    AudioFormatError,
    default_domain_shift,
    default_section_spec,
    format_clip_path,
    load_clip,
    mix_at_snr,
    parse_clip_path,
    read_manifest,
    save_clip,
    scan_dataset,
    synth_clip,
    synth_corpus,
)

SR = 16000


def spectrum_peak_hz(clip, lo_hz, hi_hz):
    """Frequency of the strongest FFT bin within [lo_hz, hi_hz]."""
    magnitude = np.abs(np.fft.rfft(clip.samples))
    freqs = np.fft.rfftfreq(len(clip.samples), 1.0 / clip.sample_rate)
    window = (freqs >= lo_hz) & (freqs <= hi_hz)
    return freqs[window][np.argmax(magnitude[window])]


class TestClipPaths:
    def test_parse_dev_style_name(self):
        meta = parse_clip_path("fan/section_00_source_train_normal_0003.wav")
        assert meta == ClipMeta("fan", 0, "source", "train", "normal", 3)

    def test_parse_eval_style_name(self):
        meta = parse_clip_path("gearbox/section_03_target_test_0010.wav")
        assert meta == ClipMeta("gearbox", 3, "target", "test", "unknown", 10)

    def test_malformed_name_raises(self):
        with pytest.raises(ClipPathError):
            parse_clip_path("fan/sect_0.wav")

    def test_error_names_offending_token(self):
        with pytest.raises(ClipPathError, match="domain"):
            parse_clip_path("fan/section_00_middle_train_normal_0000.wav")
        with pytest.raises(ClipPathError, match="section"):
            parse_clip_path("fan/section_xx_source_train_normal_0000.wav")
        with pytest.raises(ClipPathError, match="clip id"):
            parse_clip_path("fan/section_00_source_train_normal_00a0.wav")

    def test_unlabeled_train_name_rejected(self):
        with pytest.raises(ClipPathError):
            parse_clip_path("fan/section_00_source_train_0000.wav")

    def test_deep_paths_use_parent_directory_as_machine(self):
        meta = parse_clip_path("data/dev/pump/section_01_source_test_anomaly_0000.wav")
        assert meta.machine_type == "pump"

    def test_round_trip_randomized(self):
        rng = np.random.default_rng(123)
        machines = ["fan", "gearbox", "pump", "slider", "valve"]
        for _ in range(1000):
            split = rng.choice(["train", "test"])
            condition = rng.choice(
                ["normal", "anomaly", "unknown"] if split == "test" else ["normal", "anomaly"]
            )
            meta = ClipMeta(
                machine_type=str(rng.choice(machines)),
                section=int(rng.integers(0, 6)),
                domain=str(rng.choice(["source", "target"])),
                split=str(split),
                condition=str(condition),
                clip_id=int(rng.integers(0, 10000)),
            )
            path = format_clip_path(meta)
            assert parse_clip_path(path) == meta
            assert format_clip_path(parse_clip_path(path)) == path

    def test_meta_validation(self):
        with pytest.raises(ValueError):
            ClipMeta("fan", 7, "source", "train", "normal", 0)
        with pytest.raises(ValueError):
            ClipMeta("fan", 0, "source", "train", "unknown", 0)
        with pytest.raises(ValueError):
            ClipMeta("fan", 0, "source", "train", "normal", -1)


class TestWavIO:
    def test_round_trip_preserves_samples(self, tmp_path):
        rng = np.random.default_rng(0)
        clip = AudioClip(rng.uniform(-0.99, 0.99, SR), SR)
        path = tmp_path / "clip.wav"
        save_clip(clip, path)
        loaded = load_clip(path)
        assert loaded.sample_rate == SR
        assert np.max(np.abs(loaded.samples - clip.samples)) <= 0.5 / 32768.0

    def test_ten_second_file_has_160000_samples(self, tmp_path):
        path = tmp_path / "ten.wav"
        save_clip(AudioClip(np.zeros(160000), SR), path)
        assert len(load_clip(path).samples) == 160000

    def test_stereo_takes_first_channel(self, tmp_path):
        left = np.linspace(-0.5, 0.5, 64)
        right = np.zeros(64)
        interleaved = np.empty(128, dtype="<i2")
        interleaved[0::2] = np.rint(left * 32767).astype("<i2")
        interleaved[1::2] = np.rint(right * 32767).astype("<i2")
        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(SR)
            wf.writeframes(interleaved.tobytes())
        loaded = load_clip(path)
        assert np.max(np.abs(loaded.samples - left)) < 1.0 / 32768.0

    def test_wrong_rate_raises_without_resampling(self, tmp_path):
        path = tmp_path / "cd.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(44100)
            wf.writeframes(np.zeros(100, dtype="<i2").tobytes())
        with pytest.raises(AudioFormatError, match="44100"):
            load_clip(path)

    def test_truncated_file_raises(self, tmp_path):
        path = tmp_path / "short.wav"
        save_clip(AudioClip(np.zeros(1000), SR), path)
        data = path.read_bytes()
        path.write_bytes(data[:-100])
        with pytest.raises(AudioFormatError, match="truncated"):
            load_clip(path)

    def test_non_wav_rejected(self, tmp_path):
        path = tmp_path / "noise.wav"
        path.write_bytes(b"this is not RIFF data, definitely")
        with pytest.raises(AudioFormatError):
            load_clip(path)


class TestMixAtSnr:
    def test_equal_power_at_zero_db(self):
        rng = np.random.default_rng(1)
        signal = AudioClip(0.1 * np.sign(np.sin(np.arange(SR))), SR)
        noise = AudioClip(rng.normal(0, 0.1, SR).clip(-1, 1), SR)
        mixed = mix_at_snr(signal, noise, 0.0)
        residual = mixed.samples - signal.samples
        assert np.sqrt(np.mean(residual**2)) == pytest.approx(signal.rms(), rel=1e-9)

    def test_measured_snr_matches_request(self):
        rng = np.random.default_rng(2)
        t = np.arange(SR) / SR
        signal = AudioClip(0.1 * np.sin(2 * np.pi * 100 * t), SR)
        noise = AudioClip(rng.normal(0, 0.05, SR).clip(-1, 1), SR)
        for snr_db in (20.0, 10.0, 0.0, -5.0):
            mixed = mix_at_snr(signal, noise, snr_db)
            residual = mixed.samples - signal.samples
            measured = 20 * np.log10(signal.rms() / np.sqrt(np.mean(residual**2)))
            assert measured == pytest.approx(snr_db, abs=0.01)

    def test_gain_formula_twenty_db(self):
        # equal-RMS inputs at 20 dB leave the noise at a tenth of its level
        signal = AudioClip(0.1 * np.sign(np.sin(np.arange(4096))), SR)
        noise = AudioClip(0.1 * np.sign(np.cos(np.arange(4096) * 0.7)), SR)
        mixed = mix_at_snr(signal, noise, 20.0)
        residual = mixed.samples - signal.samples
        assert np.sqrt(np.mean(residual**2)) == pytest.approx(signal.rms() * 0.1, rel=1e-9)

    def test_zero_noise_raises(self):
        signal = AudioClip(0.5 * np.ones(100), SR)
        with pytest.raises(DegenerateSignalError):
            mix_at_snr(signal, AudioClip(np.zeros(100), SR), 10.0)

    def test_heavy_clipping_warns(self):
        big = AudioClip(0.9 * np.ones(1000), SR)
        with pytest.warns(ClippingWarning):
            mixed = mix_at_snr(big, AudioClip(0.9 * np.ones(1000), SR), -6.0)
        assert np.max(np.abs(mixed.samples)) <= 1.0

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            mix_at_snr(AudioClip(np.zeros(10) + 0.1), AudioClip(np.zeros(20) + 0.1), 0.0)


class TestSynthClip:
    def test_normal_spectrum_peaks_at_harmonics(self):
        spec = DomainSpec(fundamental_hz=100.0, harmonic_count=5, snr_db=10.0)
        clip = synth_clip(spec, "normal", seed=5)
        for k in range(1, 6):
            peak = spectrum_peak_hz(clip, k * 100 - 40, k * 100 + 40)
            assert abs(peak - k * 100.0) <= 0.2

    def test_anomaly_detunes_second_partial(self):
        spec = DomainSpec(fundamental_hz=100.0, harmonic_count=5, snr_db=10.0)
        clip = synth_clip(spec, "anomaly", seed=5)
        peak = spectrum_peak_hz(clip, 160, 260)
        assert abs(peak - 212.0) <= 0.2

    def test_same_seed_bit_identical(self):
        spec = DomainSpec(fundamental_hz=140.0, harmonic_count=4, snr_db=6.0)
        a = synth_clip(spec, "anomaly", seed=9)
        b = synth_clip(spec, "anomaly", seed=9)
        assert np.array_equal(a.samples, b.samples)

    def test_different_seeds_differ(self):
        spec = DomainSpec(fundamental_hz=140.0)
        a = synth_clip(spec, "normal", seed=1)
        b = synth_clip(spec, "normal", seed=2)
        assert not np.array_equal(a.samples, b.samples)

    def test_unknown_condition_rejected(self):
        with pytest.raises(ValueError):
            synth_clip(DomainSpec(100.0), "unknown", seed=0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DomainSpec(fundamental_hz=0.0)
        with pytest.raises(ValueError):
            DomainSpec(fundamental_hz=100.0, harmonic_count=0)
        with pytest.raises(ValueError):
            DomainSpec(fundamental_hz=100.0, noise_color="brown")


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    index = synth_corpus(
        root,
        machines=1,
        sections_per_machine=3,
        source_train=4,
        target_train=3,
        test_normal=2,
        test_anomaly=2,
        seed=11,
    )
    return index


class TestSynthCorpus:
    def test_count_bookkeeping(self, small_corpus):
        counts = small_corpus.counts()
        machine = small_corpus.machines[0]
        for section in range(3):
            assert counts[(machine, section, "source", "train")] == 4
            assert counts[(machine, section, "target", "train")] == 3
            assert counts[(machine, section, "source", "test")] == 4
            assert counts[(machine, section, "target", "test")] == 4

    def test_every_listed_path_exists(self, small_corpus):
        for relpath, _ in small_corpus.entries:
            assert small_corpus.path(relpath).is_file()

    def test_manifest_round_trip(self, small_corpus):
        entries = read_manifest(small_corpus.root / "manifest.csv")
        assert sorted(entries) == sorted(small_corpus.entries)

    def test_manifest_uses_lf_and_header(self, small_corpus):
        raw = (small_corpus.root / "manifest.csv").read_bytes()
        assert b"\r" not in raw
        assert raw.startswith(b"path,machine,section,domain,split,condition\n")

    def test_sections_have_distinct_fundamentals(self, small_corpus):
        machine = small_corpus.machines[0]
        peaks = []
        for section in range(3):
            relpath, _ = small_corpus.clips(
                machine_type=machine, section=section, domain="source", condition="normal"
            )[0]
            clip = load_clip(small_corpus.path(relpath))
            expected = 100.0 * (1.25**section)
            peak = spectrum_peak_hz(clip, expected - 30, expected + 30)
            peaks.append(peak)
            assert abs(peak - expected) <= 0.5
        assert len({round(p) for p in peaks}) == 3

    def test_target_fundamental_is_shifted_by_ratio(self, small_corpus):
        machine = small_corpus.machines[0]
        relpath, _ = small_corpus.clips(
            machine_type=machine, section=0, domain="target", condition="normal"
        )[0]
        clip = load_clip(small_corpus.path(relpath))
        peak = spectrum_peak_hz(clip, 30, 70)
        assert abs(peak - 50.0) <= 0.5

    def test_refuses_existing_tree_without_force(self, small_corpus):
        with pytest.raises(OutputTreeError):
            synth_corpus(small_corpus.root, source_train=1)

    def test_force_overwrites(self, tmp_path):
        root = tmp_path / "again"
        synth_corpus(root, source_train=1, target_train=1, test_normal=1, test_anomaly=1)
        index = synth_corpus(
            root, source_train=1, target_train=1, test_normal=1, test_anomaly=1, force=True
        )
        assert len(index.entries) > 0

    def test_deterministic_bytes(self, tmp_path):
        kwargs = dict(
            machines=1, sections_per_machine=1, source_train=2, target_train=2,
            test_normal=1, test_anomaly=1, seed=21,
        )
        index_a = synth_corpus(tmp_path / "a", **kwargs)
        index_b = synth_corpus(tmp_path / "b", **kwargs)
        for (rel_a, _), (rel_b, _) in zip(index_a.entries, index_b.entries):
            assert rel_a == rel_b
            assert index_a.path(rel_a).read_bytes() == index_b.path(rel_b).read_bytes()

    def test_count_validation(self, tmp_path):
        with pytest.raises(ValueError):
            synth_corpus(tmp_path / "bad", source_train=0)
        with pytest.raises(ValueError):
            synth_corpus(tmp_path / "bad", sections_per_machine=7)

    def test_default_counts_mirror_the_standard_layout(self):
        import inspect

        signature = inspect.signature(synth_corpus)
        assert signature.parameters["source_train"].default == 1000
        assert signature.parameters["target_train"].default == 3
        assert signature.parameters["test_normal"].default == 50
        assert signature.parameters["test_anomaly"].default == 50


class TestScanDataset:
    def test_round_trip_matches_synth_index(self, small_corpus):
        scanned = scan_dataset(small_corpus.root)
        assert scanned.entries == small_corpus.entries
        assert scanned.counts() == small_corpus.counts()

    def test_stray_file_is_noted_not_fatal(self, small_corpus):
        stray = small_corpus.root / small_corpus.machines[0] / "readme.txt"
        stray.write_text("notes")
        try:
            scanned = scan_dataset(small_corpus.root)
            assert scanned.entries == small_corpus.entries
            assert len(scanned.skipped) == 1
            assert scanned.skipped[0].endswith("readme.txt")
        finally:
            stray.unlink()

    def test_empty_tree_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError):
            scan_dataset(tmp_path / "empty")

    def test_missing_root_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_dataset(tmp_path / "nope")

    def test_duplicate_metadata_rejected(self, tmp_path):
        meta = ClipMeta("fan", 0, "source", "train", "normal", 0)
        with pytest.raises(ValueError):
            DatasetIndex(tmp_path, [("a.wav", meta), ("b.wav", meta)])


class TestDefaultSpecs:
    def test_shift_halves_fundamental_and_drops_snr(self):
        spec = default_section_spec(0, 2)
        shifted = default_domain_shift(spec)
        assert shifted.fundamental_hz == pytest.approx(spec.fundamental_hz * 0.5)
        assert shifted.snr_db == pytest.approx(spec.snr_db - 5.0)
        assert shifted.harmonic_count == spec.harmonic_count
