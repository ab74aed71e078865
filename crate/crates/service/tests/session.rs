use hemoloop_core::dicom::write_slice;
use hemoloop_core::grid::{Shape, Spacing};
use hemoloop_core::phantom::PhantomSpec;
use hemoloop_service::protocol::{ErrCode, Frame, FrameError};
use hemoloop_service::session::{PushSession, SessionState, Step};
use proptest::prelude::*;

fn files(n: usize) -> Vec<Vec<u8>> {
    let p = PhantomSpec::hard_negative(Shape::new(8, 8, n), Spacing::default()).generate(3);
    p.to_slices().iter().map(write_slice).collect()
}

fn hello() -> Frame {
    Frame::Hello {
        site: "site1".into(),
        user: "u1".into(),
    }
}

#[test]
fn hello_three_data_commit() {
    let mut s = PushSession::new(1);
    assert_eq!(s.state(), SessionState::Handshake);
    assert!(matches!(s.on_frame(hello()), Step::Continue));
    assert_eq!((s.state(), s.site()), (SessionState::Receiving, "site1"));
    for f in files(3) {
        assert!(matches!(s.on_frame(Frame::Data(f)), Step::Continue));
    }
    assert_eq!(s.received_slices(), 3);
    match s.on_frame(Frame::Commit { slice_count: 3 }) {
        Step::Commit(c) => {
            assert_eq!((c.slice_count, c.site.as_str(), c.user.as_str()), (3, "site1", "u1"));
            assert_eq!(c.volume.shape(), Shape::new(8, 8, 3));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(s.state(), SessionState::Committed);
    assert!(matches!(s.on_frame(hello()), Step::Reject(r) if r.code == ErrCode::ProtocolViolation));
}

#[test]
fn commit_before_hello_aborts() {
    let mut s = PushSession::new(1);
    assert!(matches!(s.on_frame(Frame::Commit { slice_count: 0 }), Step::Reject(r) if r.code == ErrCode::ProtocolViolation));
    assert_eq!(s.state(), SessionState::Aborted);
}

#[test]
fn empty_commit_and_parse_failure_abort() {
    let mut s = PushSession::new(1);
    s.on_frame(hello());
    assert!(matches!(s.on_frame(Frame::Commit { slice_count: 0 }), Step::Reject(r) if r.code == ErrCode::CountMismatch));
    let mut s = PushSession::new(2);
    s.on_frame(hello());
    s.on_frame(Frame::Data(files(1).remove(0)));
    assert!(matches!(s.on_frame(Frame::Data(b"not a slice".to_vec())), Step::Reject(r) if r.code == ErrCode::ParseFailure));
    assert_eq!((s.state(), s.received_slices()), (SessionState::Aborted, 0));
}

#[test]
fn frame_encoding_examples() {
    assert_eq!(Frame::Commit { slice_count: 3 }.encode(), vec![5, 0, 0, 0, 3, 3, 0, 0, 0]);
    assert_eq!(
        Frame::Hello { site: "ab".into(), user: "".into() }.encode(),
        vec![7, 0, 0, 0, 1, 2, 0, b'a', b'b', 0, 0]
    );
    assert_eq!(
        Frame::Err { code: ErrCode::ParseFailure, message: "x".into() }.encode(),
        vec![6, 0, 0, 0, 6, 2, 0, 1, 0, b'x']
    );
    assert!(matches!(Frame::decode(&[3, 1, 0]), Err(FrameError::Malformed("COMMIT"))));
    assert!(matches!(Frame::decode(&[1, 5, 0, b'a']), Err(FrameError::Malformed("HELLO"))));
    assert!(matches!(Frame::decode(&[]), Err(FrameError::Empty)));
    assert!(matches!(Frame::decode(&[0]), Err(FrameError::UnknownType(0))));
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    let text = "[a-zA-Z0-9 ._-]{0,40}";
    prop_oneof![
        (text, text).prop_map(|(site, user)| Frame::Hello { site, user }),
        prop::collection::vec(any::<u8>(), 0..200).prop_map(Frame::Data),
        any::<u32>().prop_map(|slice_count| Frame::Commit { slice_count }),
        Just(Frame::Abort),
        prop::collection::vec(any::<u8>(), 0..200).prop_map(Frame::Ack),
        (1u16..7, text).prop_map(|(c, message)| Frame::Err { code: ErrCode::from_u16(c), message }),
    ]
}

proptest! {
    #[test]
    fn frames_round_trip(f in arb_frame()) {
        let bytes = f.encode();
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len, bytes.len() - 4);
        prop_assert_eq!(Frame::decode(&bytes[4..]).unwrap(), f.clone());
        let mut cur = std::io::Cursor::new(bytes);
        prop_assert_eq!(hemoloop_service::protocol::read_frame(&mut cur).unwrap(), f);
    }

    /// States only move forward, and a commit needs a HELLO and at least
    /// one DATA frame before it.
    #[test]
    fn transitions_follow_the_state_machine(kinds in prop::collection::vec(0u8..5, 0..12)) {
        let slices = files(2);
        let mut s = PushSession::new(9);
        let mut saw_hello = false;
        let mut data = 0usize;
        let rank = |st: SessionState| match st {
            SessionState::Handshake => 0,
            SessionState::Receiving => 1,
            SessionState::Committed | SessionState::Aborted => 2,
        };
        for k in kinds {
            let before = s.state();
            let frame = match k {
                0 => hello(),
                1 => Frame::Data(slices[data.min(1)].clone()),
                2 => Frame::Commit { slice_count: data as u32 },
                3 => Frame::Abort,
                _ => Frame::Ack(vec![]),
            };
            let step = s.on_frame(frame);
            prop_assert!(rank(s.state()) >= rank(before));
            if let Step::Commit(c) = &step {
                prop_assert!(saw_hello && c.slice_count >= 1);
            }
            if before == SessionState::Handshake && k == 0 { saw_hello = true; }
            if before == SessionState::Receiving && k == 1 { data += 1; }
            if matches!(before, SessionState::Committed | SessionState::Aborted) {
                prop_assert_eq!(s.state(), before);
            }
        }
    }
}
